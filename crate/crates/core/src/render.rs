//! Pinhole cameras, ray sampling, transmittance compositing, median depth,
//! and hierarchical resampling.
//!
//! Compositing follows the usual quadrature of the volume rendering
//! integral: T_i = exp(-sum_{j<i} sigma_j delta_j),
//! w_i = T_i (1 - exp(-sigma_i delta_i)), rgb = sum_i w_i c_i. The last
//! delta is far - t_last (bounded, so sum w <= 1 holds without an infinity
//! sentinel). Both a host path (analytic fields, ground-truth quadrature)
//! and a tape path (training) are provided.

use crate::lie::RigidTransform3;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pixel ({x}, {y}) outside {w}x{h} image")]
    PixelOutOfBounds { x: f64, y: f64, w: usize, h: usize },
    #[error("negative density {sigma} at ray {ray}, sample {sample}")]
    NegativeDensity { sigma: f64, ray: usize, sample: usize },
}

/// Which way the optical axis points in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forward {
    NegZ,
    PosZ,
}

#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera transform.
    pub pose: RigidTransform3,
    pub near: f64,
    pub far: f64,
    pub forward: Forward,
}

impl Camera {
    /// Symmetric pinhole with the principal point at the image center.
    pub fn centered(width: usize, height: usize, focal: f64, pose: RigidTransform3, near: f64, far: f64) -> Self {
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            pose,
            near,
            far,
            forward: Forward::NegZ,
        }
    }

    /// Ray through a pixel position (no bounds check); `(px, py)` is in
    /// pixel units, typically a pixel center (u + 0.5, v + 0.5).
    pub fn ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>) {
        let x = (px - self.cx) / self.fx;
        let y = (py - self.cy) / self.fy;
        let dir_cam = match self.forward {
            Forward::NegZ => Vector3::new(x, -y, -1.0),
            Forward::PosZ => Vector3::new(x, y, 1.0),
        };
        let dir_world = (self.pose.rotation * dir_cam).normalize();
        (self.pose.translation, dir_world)
    }
}

/// Ray bundle: one origin/direction pair per requested pixel.
#[derive(Debug)]
pub struct Rays {
    pub origins: Vec<Vector3<f64>>,
    pub dirs: Vec<Vector3<f64>>,
}

/// Casts rays through the given pixel positions, rejecting out-of-bounds
/// pixels.
pub fn cast_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Result<Rays, RenderError> {
    let mut origins = Vec::with_capacity(pixels.len());
    let mut dirs = Vec::with_capacity(pixels.len());
    for &(px, py) in pixels {
        if px < 0.0 || py < 0.0 || px > camera.width as f64 || py > camera.height as f64 {
            return Err(RenderError::PixelOutOfBounds {
                x: px,
                y: py,
                w: camera.width,
                h: camera.height,
            });
        }
        let (o, d) = camera.ray(px, py);
        origins.push(o);
        dirs.push(d);
    }
    Ok(Rays { origins, dirs })
}

/// One depth per equal bin of [near, far]; uniform within the bin when an
/// rng is supplied, bin midpoints otherwise.
pub fn sample_stratified(near: f64, far: f64, n: usize, mut rng: Option<&mut dyn rand::RngCore>) -> Vec<f64> {
    assert!(n >= 1);
    assert!(near < far);
    let bin = (far - near) / n as f64;
    (0..n)
        .map(|i| {
            let lo = near + bin * i as f64;
            match rng.as_deref_mut() {
                Some(r) => lo + bin * r.gen_range(0.0..1.0),
                None => lo + bin * 0.5,
            }
        })
        .collect()
}

/// Per-sample deltas for ascending depths; the terminal delta is
/// far - t_last.
pub fn deltas_from_depths(t: &[f64], far: f64) -> Vec<f64> {
    let n = t.len();
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { far };
        d.push((next - t[i]).max(0.0));
    }
    d
}

/// Composited quantities of a ray batch on the tape.
pub struct Composite {
    /// Per-channel expected color, (rays x 1) each.
    pub rgb: [NodeId; 3],
    /// Rendering weights w_i, (rays x samples).
    pub weights: NodeId,
    /// Transmittance before each sample, (rays x samples).
    pub transmittance: NodeId,
    /// Accumulated opacity sum w_i, (rays x 1).
    pub opacity: NodeId,
}

/// Tape compositing of densities and colors sampled along rays.
///
/// `sigma`, `deltas` are (rays x samples); `rgb` are three channel nodes
/// of the same shape.
pub fn composite_tape(
    tape: &mut Tape,
    sigma: NodeId,
    rgb: [NodeId; 3],
    deltas: NodeId,
) -> Composite {
    let tau = tape.mul(sigma, deltas);
    let acc = tape.cumsum_excl_rows(tau);
    let neg = tape.neg(acc);
    let transmittance = tape.exp(neg);
    let ntau = tape.neg(tau);
    let decay = tape.exp(ntau);
    let neg_decay = tape.scale(decay, -1.0);
    let alpha = tape.add_scalar(neg_decay, 1.0); // 1 - exp(-sigma delta)
    let weights = tape.mul(transmittance, alpha);
    let rgb_out = rgb.map(|c| {
        let wc = tape.mul(weights, c);
        tape.row_sum(wc)
    });
    let opacity = tape.row_sum(weights);
    Composite {
        rgb: rgb_out,
        weights,
        transmittance,
        opacity,
    }
}

/// Host-side composited batch.
pub struct CompositeHost {
    pub rgb: Vec<[f64; 3]>,
    /// (rays x samples) rendering weights.
    pub weights: Tensor,
    /// (rays x samples) transmittance before each sample.
    pub transmittance: Tensor,
    pub opacity: Vec<f64>,
}

/// Host compositing; used for analytic ground truth and quadrature
/// oracles. `sigma` and `deltas` are (rays x samples); `rgb` is
/// (rays*samples x 3) row-major.
pub fn composite_host(
    sigma: &Tensor,
    rgb: &Tensor,
    deltas: &Tensor,
) -> Result<CompositeHost, RenderError> {
    let (rays, k) = sigma.shape();
    assert_eq!(deltas.shape(), (rays, k));
    assert_eq!(rgb.shape(), (rays * k, 3));
    let mut weights = Tensor::zeros(rays, k);
    let mut transmittance = Tensor::zeros(rays, k);
    let mut out_rgb = Vec::with_capacity(rays);
    let mut opacity = Vec::with_capacity(rays);
    for r in 0..rays {
        let mut t_acc = 1.0f64;
        let mut color = [0.0f64; 3];
        let mut w_sum = 0.0;
        for i in 0..k {
            let s = sigma.at(r, i);
            if s < 0.0 {
                return Err(RenderError::NegativeDensity {
                    sigma: s,
                    ray: r,
                    sample: i,
                });
            }
            let tau = s * deltas.at(r, i);
            let alpha = 1.0 - (-tau).exp();
            let w = t_acc * alpha;
            transmittance.set(r, i, t_acc);
            weights.set(r, i, w);
            let c = rgb.row_slice(r * k + i);
            for ch in 0..3 {
                color[ch] += w * c[ch];
            }
            w_sum += w;
            t_acc *= (-tau).exp();
        }
        out_rgb.push(color);
        opacity.push(w_sum);
    }
    Ok(CompositeHost {
        rgb: out_rgb,
        weights,
        transmittance,
        opacity,
    })
}

/// Depth of the first sample whose post-sample transmittance drops to 0.5
/// or below (accumulated opacity reaches one half); `far` when the ray
/// never gets there.
pub fn median_depth(t: &Tensor, sigma: &Tensor, deltas: &Tensor, far: f64) -> Vec<f64> {
    let (rays, k) = t.shape();
    let mut out = Vec::with_capacity(rays);
    for r in 0..rays {
        let mut acc = 0.0f64; // sum of sigma * delta so far (including i)
        let mut depth = far;
        for i in 0..k {
            acc += sigma.at(r, i) * deltas.at(r, i);
            if (-acc).exp() <= 0.5 {
                depth = t.at(r, i);
                break;
            }
        }
        out.push(depth);
    }
    out
}

/// Inverse-CDF resampling of one ray: picks `n_fine` extra depths with
/// probability proportional to the coarse weights (floored so empty rays
/// fall back to stratified draws), then merges them sorted with the
/// coarse depths.
pub fn hierarchical_resample(
    coarse_t: &[f64],
    weights: &[f64],
    n_fine: usize,
    far: f64,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Vec<f64> {
    assert_eq!(coarse_t.len(), weights.len());
    let k = coarse_t.len();
    let total: f64 = weights.iter().sum();
    let floor = 1e-5;
    let probs: Vec<f64> = if total <= floor {
        vec![1.0 / k as f64; k]
    } else {
        let flo: Vec<f64> = weights.iter().map(|&w| w.max(0.0) + floor * total).collect();
        let z: f64 = flo.iter().sum();
        flo.iter().map(|w| w / z).collect()
    };
    let mut cdf = Vec::with_capacity(k + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cdf.push(acc);
    }
    cdf[k] = 1.0;

    let mut fine = Vec::with_capacity(n_fine);
    for i in 0..n_fine {
        // Stratified uniforms keep the draw deterministic without an rng.
        let u = match rng.as_deref_mut() {
            Some(r) => (i as f64 + r.gen_range(0.0..1.0)) / n_fine as f64,
            None => (i as f64 + 0.5) / n_fine as f64,
        };
        let bin = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(b) => b.min(k - 1),
            Err(b) => b.saturating_sub(1).min(k - 1),
        };
        let lo = coarse_t[bin];
        let hi = if bin + 1 < k { coarse_t[bin + 1] } else { far };
        let frac = (u - cdf[bin]) / (cdf[bin + 1] - cdf[bin]).max(1e-300);
        fine.push(lo + (hi - lo) * frac);
    }

    let mut merged: Vec<f64> = coarse_t.iter().copied().chain(fine).collect();
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
    merged
}
