//! Sinusoidal positional encoding and its windowed coarse-to-fine variant.
//!
//! The plain encoding maps x to (x, sin(2^k pi x), cos(2^k pi x), ...) for
//! k in 0..m. The windowed variant scales band k by a truncated-Hann weight
//! w_k(alpha) so that frequencies ease in as alpha anneals from 0 to m:
//! alpha = 0 leaves only the identity block, alpha = m reproduces the plain
//! encoding exactly.
//!
//! Output layout: identity block first, then per band k ascending,
//! all input dims of sin(2^k pi x) followed by all input dims of
//! cos(2^k pi x). Checkpoints depend on this ordering.

use crate::tape::{NodeId, Tape};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingSpec {
    /// Number of frequency bands m.
    pub bands: usize,
    /// Keep the raw input as the leading block. Always on in practice.
    pub include_identity: bool,
    pub input_dim: usize,
}

impl EncodingSpec {
    pub fn new(input_dim: usize, bands: usize) -> Self {
        EncodingSpec {
            bands,
            include_identity: true,
            input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        let ident = if self.include_identity { self.input_dim } else { 0 };
        ident + self.input_dim * 2 * self.bands
    }
}

/// Annealing schedule state: alpha(t) = clamp(m t / N, 0, m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealState {
    pub alpha: f64,
    /// Steps until alpha reaches m.
    pub n_steps: u64,
    pub step: u64,
}

impl AnnealState {
    /// Fully annealed: all bands on.
    pub fn full(bands: usize) -> Self {
        AnnealState {
            alpha: bands as f64,
            n_steps: 0,
            step: 0,
        }
    }

    pub fn start(n_steps: u64) -> Self {
        AnnealState {
            alpha: 0.0,
            n_steps,
            step: 0,
        }
    }
}

/// Advances the linear schedule to step t.
pub fn anneal_step(state: &AnnealState, bands: usize, t: u64) -> AnnealState {
    let m = bands as f64;
    let alpha = if state.n_steps == 0 {
        m
    } else {
        (m * t as f64 / state.n_steps as f64).clamp(0.0, m)
    };
    AnnealState {
        alpha,
        n_steps: state.n_steps,
        step: t,
    }
}

/// Truncated-Hann band weight: (1 - cos(pi clamp(alpha - j, 0, 1))) / 2.
/// Exactly 0 for alpha <= j and exactly 1 for alpha >= j + 1.
pub fn window_weight(j: usize, alpha: f64) -> f64 {
    let x = (alpha - j as f64).clamp(0.0, 1.0);
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        (1.0 - (PI * x).cos()) / 2.0
    }
}

/// Plain positional encoding of one vector.
pub fn encode(spec: &EncodingSpec, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), spec.input_dim);
    let mut out = Vec::with_capacity(spec.output_dim());
    if spec.include_identity {
        out.extend_from_slice(x);
    }
    for k in 0..spec.bands {
        let f = (1u64 << k) as f64 * PI;
        for &xi in x {
            out.push((f * xi).sin());
        }
        for &xi in x {
            out.push((f * xi).cos());
        }
    }
    out
}

/// Windowed positional encoding of one vector; band k scaled by w_k(alpha).
pub fn encode_windowed(spec: &EncodingSpec, alpha: f64, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), spec.input_dim);
    let mut out = Vec::with_capacity(spec.output_dim());
    if spec.include_identity {
        out.extend_from_slice(x);
    }
    for k in 0..spec.bands {
        let w = window_weight(k, alpha);
        let f = (1u64 << k) as f64 * PI;
        for &xi in x {
            out.push(if w == 1.0 { (f * xi).sin() } else { w * (f * xi).sin() });
        }
        for &xi in x {
            out.push(if w == 1.0 { (f * xi).cos() } else { w * (f * xi).cos() });
        }
    }
    out
}

/// Tape version of [`encode`] over a batch (n x input_dim) node.
pub fn encode_tape(tape: &mut Tape, spec: &EncodingSpec, x: NodeId) -> NodeId {
    encode_windowed_tape(tape, spec, spec.bands as f64, x)
}

/// Tape version of [`encode_windowed`]. At alpha = m the scaling nodes are
/// skipped entirely, so the result is bitwise identical to [`encode_tape`].
pub fn encode_windowed_tape(tape: &mut Tape, spec: &EncodingSpec, alpha: f64, x: NodeId) -> NodeId {
    let mut parts = Vec::with_capacity(1 + 2 * spec.bands);
    if spec.include_identity {
        parts.push(x);
    }
    for k in 0..spec.bands {
        let w = window_weight(k, alpha);
        let f = (1u64 << k) as f64 * PI;
        let scaled = tape.scale(x, f);
        let s = tape.sin(scaled);
        let c = tape.cos(scaled);
        if w == 1.0 {
            parts.push(s);
            parts.push(c);
        } else {
            parts.push(tape.scale(s, w));
            parts.push(tape.scale(c, w));
        }
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_bands_is_identity() {
        let spec = EncodingSpec::new(3, 0);
        let x = [0.3, -0.7, 0.1];
        assert_eq!(encode(&spec, &x), x.to_vec());
    }

    #[test]
    fn zero_input_gives_sin_zero_cos_one_pattern() {
        let spec = EncodingSpec::new(1, 3);
        let e = encode(&spec, &[0.0]);
        assert_eq!(e, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn half_input_two_bands_exact_values() {
        // x = 0.5: sin(pi/2) = 1, cos(pi/2) = 0, sin(pi) ~ 0, cos(pi) = -1
        let spec = EncodingSpec::new(1, 2);
        let e = encode(&spec, &[0.5]);
        assert_eq!(e[0], 0.5);
        assert!((e[1] - 1.0).abs() < 1e-15);
        assert!(e[2].abs() < 1e-15);
        assert!(e[3].abs() < 1e-15);
        assert!((e[4] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_endpoints() {
        let m = 6;
        for j in 0..m {
            assert_eq!(window_weight(j, 0.0), 0.0);
            assert_eq!(window_weight(j, m as f64), 1.0);
        }
        assert!((window_weight(0, 0.5) - 0.5).abs() < 1e-15); // (1 - cos(pi/2)) / 2
    }

    #[test]
    fn windowed_at_zero_keeps_identity_only() {
        let spec = EncodingSpec::new(2, 3);
        let x = [0.4, -0.2];
        let e = encode_windowed(&spec, 0.0, &x);
        assert_eq!(&e[..2], &x);
        assert!(e[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn windowed_at_m_bit_equals_plain() {
        let spec = EncodingSpec::new(3, 6);
        let x = [0.123, -0.456, 0.789];
        assert_eq!(encode_windowed(&spec, 6.0, &x), encode(&spec, &x));
    }

    #[test]
    fn partial_alpha_scales_bands() {
        // alpha = 1.5, m = 2: band 0 fully on, band 1 at w = 0.5.
        let spec = EncodingSpec::new(1, 2);
        let x = [0.25];
        let e = encode_windowed(&spec, 1.5, &x);
        let f0 = PI * 0.25;
        let f1 = 2.0 * PI * 0.25;
        let expect = [
            0.25,
            f0.sin(),
            f0.cos(),
            0.5 * f1.sin(),
            0.5 * f1.cos(),
        ];
        for (a, b) in e.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15, "{e:?} vs {expect:?}");
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let st = AnnealState::start(80_000);
        assert_eq!(anneal_step(&st, 6, 0).alpha, 0.0);
        assert_eq!(anneal_step(&st, 6, 80_000).alpha, 6.0);
        assert_eq!(anneal_step(&st, 6, 40_000).alpha, 3.0);
        assert_eq!(anneal_step(&st, 6, 200_000).alpha, 6.0); // clamped past N
    }

    #[test]
    fn window_monotone_and_ordered() {
        let m = 4;
        let mut prev = vec![0.0; m];
        let steps = 400;
        for i in 0..=steps {
            let alpha = m as f64 * i as f64 / steps as f64;
            let w: Vec<f64> = (0..m).map(|j| window_weight(j, alpha)).collect();
            for j in 0..m {
                assert!(w[j] >= prev[j] - 1e-15, "w_{j} not monotone in alpha");
                if j > 0 {
                    assert!(w[j] <= w[j - 1] + 1e-15, "w_{j} exceeds w_{}", j - 1);
                }
            }
            prev = w;
        }
    }

    #[test]
    fn tape_encoding_matches_host() {
        let spec = EncodingSpec::new(2, 4);
        let xs = [[0.3, -0.9], [0.05, 0.62]];
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[xs[0].to_vec(), xs[1].to_vec()]));
        let e = encode_windowed_tape(&mut tape, &spec, 2.3, x);
        for (r, xr) in xs.iter().enumerate() {
            let host = encode_windowed(&spec, 2.3, xr);
            assert_eq!(tape.value(e).row_slice(r), &host[..]);
        }
    }
}
