//! Elastic regularization of the warp Jacobian and the static-point
//! background penalty.
//!
//! The elastic energy is the squared Frobenius norm of the log singular
//! values of the spatial Jacobian: zero iff the local deformation is a
//! rigid motion, and symmetric under contraction/expansion by the same
//! factor. It is remapped by the Geman-McClure robust function
//! rho(x, c) = 2 (x/c)^2 / ((x/c)^2 + 4) so outlier deformations stop
//! contributing gradient, and gated per ray sample by the rendering
//! weight w_i so empty space deforms freely.
//!
//! On the tape both remaps are evaluated in the squared energy
//! e = |log Sigma|_F^2: rho(sqrt(e), c) = 2 e / (e + 4 c^2), which avoids
//! the sqrt singularity at exactly rigid points.

use crate::fields::DeformationField;
use crate::nn::{sample_gaussian, ParamStore};
use crate::svd::svd3;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use nalgebra::{Matrix2, Matrix3};
use rand::seq::SliceRandom;
use rand::Rng;

/// Floor applied to singular values before taking logs; anything at or
/// below it counts as a collapsed Jacobian.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct ElasticConfig {
    /// Loss weight lambda.
    pub weight: f64,
    /// Robust scale c.
    pub scale: f64,
    /// Gate each sample by its rendering weight w_i.
    pub weight_by_w: bool,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig {
            weight: 1e-3,
            scale: 0.03,
            weight_by_w: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackgroundConfig {
    /// Loss weight mu.
    pub weight: f64,
    /// Points drawn per evaluation.
    pub subsample: usize,
    /// Standard deviation of the input jitter.
    pub jitter_sigma: f64,
    /// Robust loss shape; only the Geman-McClure case (-2) is supported.
    pub robust_alpha: f64,
    pub robust_c: f64,
    /// Appendix robust form when true, plain L2 distance otherwise.
    pub robust: bool,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            weight: 1e-3,
            subsample: 16384,
            jitter_sigma: 0.001,
            robust_alpha: -2.0,
            robust_c: 0.001,
            robust: true,
        }
    }
}

/// Elastic energy of a 3x3 Jacobian: sum of squared log singular values.
/// Singular values at or below [`SIGMA_FLOOR`] are clamped.
pub fn elastic_energy(j: &Matrix3<f64>) -> f64 {
    let (_, s, _) = svd3(j);
    s.iter().map(|&x| x.max(SIGMA_FLOOR).ln().powi(2)).sum()
}

/// 2x2 variant used by the planar toy setting; same formula.
pub fn elastic_energy2(j: &Matrix2<f64>) -> f64 {
    let (_, s, _) = crate::svd::svd2(j);
    s.iter().map(|&x| x.max(SIGMA_FLOOR).ln().powi(2)).sum()
}

/// Geman-McClure remap of a non-negative energy magnitude.
pub fn robust_remap(x: f64, c: f64) -> f64 {
    assert!(c > 0.0);
    let q = (x / c) * (x / c);
    2.0 * q / (q + 4.0)
}

/// General robust loss of Barron parameterized by alpha; alpha = -2 is the
/// Geman-McClure case used for the background term. Host-side reference.
pub fn general_robust_loss(x: f64, alpha: f64, c: f64) -> f64 {
    let q = (x / c) * (x / c);
    if alpha == 2.0 {
        q / 2.0
    } else if alpha == 0.0 {
        (q / 2.0).ln_1p()
    } else {
        let b = (alpha - 2.0).abs();
        (b / alpha) * ((q / b + 1.0).powf(alpha / 2.0) - 1.0)
    }
}

/// Elastic term of one batch, built on the tape.
pub struct ElasticTerm {
    /// Mean over rays of the w-weighted robust elastic penalty.
    pub loss: NodeId,
    /// Samples whose Jacobian had a singular value at or below the floor.
    pub collapsed: usize,
}

/// Robust, weight-gated elastic penalty over ray samples.
///
/// `jacobians` is (n x d*d) with n = n_rays * samples_per_ray, row-major
/// per-sample matrices; `weights` carries the rendering weights w_i laid
/// out (n_rays x samples_per_ray). Weights enter as constants
/// (stop-gradient) when the config says so: the regularizer shapes the
/// warp, not the density.
pub fn elastic_loss_tape(
    tape: &mut Tape,
    jacobians: NodeId,
    d: usize,
    weights: NodeId,
    cfg: &ElasticConfig,
) -> ElasticTerm {
    let (n, dd) = tape.value(jacobians).shape();
    assert_eq!(dd, d * d, "jacobian row length {dd} != {d}x{d}");
    let (rays, per_ray) = tape.value(weights).shape();
    assert_eq!(
        rays * per_ray,
        n,
        "weight count {}x{} does not match {} samples",
        rays,
        per_ray,
        n
    );

    let sig = tape.sing_vals(d, jacobians);
    let collapsed = tape
        .value(sig)
        .data()
        .iter()
        .filter(|&&x| x <= SIGMA_FLOOR)
        .count();
    let sig = tape.clamp_min(sig, SIGMA_FLOOR);
    let logs = tape.ln(sig);
    let sq = tape.square(logs);
    let e = tape.row_sum(sq); // n x 1

    // rho(sqrt(e), c) = 2 e / (e + 4 c^2)
    let num = tape.scale(e, 2.0);
    let den = tape.add_scalar(e, 4.0 * cfg.scale * cfg.scale);
    let rho = tape.div(num, den);

    let rho = tape.reshape(rho, rays, per_ray);
    let gated = if cfg.weight_by_w {
        let w = tape.detach(weights);
        tape.mul(w, rho)
    } else {
        tape.mul(weights, rho)
    };
    let per_ray_sum = tape.row_sum(gated);
    let loss = tape.mean(per_ray_sum);
    ElasticTerm { loss, collapsed }
}

/// Background term of one batch.
pub struct BackgroundTerm {
    pub loss: NodeId,
    pub points_used: usize,
}

/// Penalizes displacement of known-static points, with Gaussian input
/// jitter and the robust remap. Subsamples up to `cfg.subsample` points
/// (without replacement when possible); each sampled point is paired with
/// a frame drawn from `frames`. An empty point set contributes zero.
pub fn background_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    field: &DeformationField,
    points: &[[f64; 3]],
    frames: &[usize],
    alpha: f64,
    cfg: &BackgroundConfig,
    rng: &mut impl Rng,
) -> Result<BackgroundTerm, crate::fields::FieldError> {
    assert!(
        cfg.robust_alpha == -2.0,
        "only the Geman-McClure case (alpha = -2) is implemented on the tape"
    );
    if points.is_empty() || frames.is_empty() {
        let loss = tape.input(Tensor::scalar(0.0));
        return Ok(BackgroundTerm {
            loss,
            points_used: 0,
        });
    }
    let count = cfg.subsample.min(points.len()).max(1);
    let mut chosen: Vec<[f64; 3]> = Vec::with_capacity(count);
    if count == points.len() {
        chosen.extend_from_slice(points);
    } else {
        // Without replacement via a partial shuffle of indices.
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.partial_shuffle(rng, count);
        chosen.extend(idx[..count].iter().map(|&i| points[i]));
    }
    let frame_pick: Vec<usize> = (0..count)
        .map(|_| frames[rng.gen_range(0..frames.len())])
        .collect();

    let rows: Vec<Vec<f64>> = chosen
        .iter()
        .map(|p| {
            (0..3)
                .map(|k| p[k] + cfg.jitter_sigma * sample_gaussian(rng))
                .collect()
        })
        .collect();
    let x = tape.input(Tensor::from_rows(&rows));
    let warped = field.warp(tape, store, x, &frame_pick, alpha)?;
    let diff = tape.sub(warped, x);
    let sq = tape.square(diff);
    let e = tape.row_sum(sq);
    let loss = if cfg.robust {
        let num = tape.scale(e, 2.0);
        let den = tape.add_scalar(e, 4.0 * cfg.robust_c * cfg.robust_c);
        let rho = tape.div(num, den);
        tape.mean(rho)
    } else {
        // Smoothed L2 distance; the tiny offset keeps the sqrt gradient
        // bounded at exactly-static points.
        let e = tape.add_scalar(e, 1e-24);
        let norm = tape.sqrt(e);
        tape.mean(norm)
    };
    Ok(BackgroundTerm {
        loss,
        points_used: count,
    })
}

/// Frobenius distance from a Jacobian to its closest rotation
/// R = U M V^T, M = diag(1, ..., det(U V^T)). Test oracle, not a loss.
pub fn closest_rotation_residual(j: &Matrix3<f64>) -> f64 {
    let (u, _, v) = svd3(j);
    let m = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        1.0,
        1.0,
        (u * v.transpose()).determinant(),
    ));
    let r = u * m * v.transpose();
    (j - r).norm()
}
