//! Singular value decomposition of 2x2 and 3x3 matrices by one-sided Jacobi.
//!
//! Returns J = U * diag(sigma) * V^T with sigma descending and non-negative,
//! V a rotation (det +1), and any reflection folded into U, so
//! det(U V^T) = sign(det J). Deterministic: fixed sweep order, fixed
//! iteration bound.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

const MAX_SWEEPS: usize = 30;
const OFF_TOL: f64 = 1e-30;

/// SVD of a d x d row-major matrix (d <= 3). Returns (U, sigma, V) as
/// row-major d*d buffers padded into fixed arrays.
pub fn svd_flat(d: usize, a: &[f64]) -> ([f64; 9], [f64; 3], [f64; 9]) {
    debug_assert!(d == 2 || d == 3);
    debug_assert_eq!(a.len(), d * d);

    // Work on columns of A; accumulate the right rotations into V.
    let mut w = [0.0f64; 9]; // column-major working copy of A
    for r in 0..d {
        for c in 0..d {
            w[c * d + r] = a[r * d + c];
        }
    }
    let mut v = [0.0f64; 9]; // column-major V
    for i in 0..d {
        v[i * d + i] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..d {
                    let x = w[p * d + r];
                    let y = w[q * d + r];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= OFF_TOL.max(1e-15 * (app * aqq).sqrt()) {
                    continue;
                }
                rotated = true;
                // Jacobi rotation zeroing the (p,q) entry of the Gram matrix.
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..d {
                    let x = w[p * d + r];
                    let y = w[q * d + r];
                    w[p * d + r] = c * x - s * y;
                    w[q * d + r] = s * x + c * y;
                }
                for r in 0..d {
                    let x = v[p * d + r];
                    let y = v[q * d + r];
                    v[p * d + r] = c * x - s * y;
                    v[q * d + r] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; normalized columns form U.
    let mut sigma = [0.0f64; 3];
    let mut u = [0.0f64; 9]; // column-major U
    let mut order = [0usize; 3];
    for (i, o) in order.iter_mut().enumerate().take(d) {
        *o = i;
        let mut n = 0.0;
        for r in 0..d {
            n += w[i * d + r] * w[i * d + r];
        }
        sigma[i] = n.sqrt();
    }
    order[..d].sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());

    let mut s_sorted = [0.0f64; 3];
    let mut v_sorted = [0.0f64; 9];
    for (new, &old) in order.iter().enumerate().take(d) {
        s_sorted[new] = sigma[old];
        for r in 0..d {
            v_sorted[new * d + r] = v[old * d + r];
            u[new * d + r] = w[old * d + r];
        }
    }

    // Normalize U columns; complete near-zero columns orthonormally.
    let eps = s_sorted[0].max(1.0) * 1e-300;
    for i in 0..d {
        if s_sorted[i] > eps {
            for r in 0..d {
                u[i * d + r] /= s_sorted[i];
            }
        } else {
            complete_column(d, &mut u, i);
        }
    }

    // Keep V a rotation: if the permutation flipped its orientation (or d=2
    // with a reflection), move the sign into the last column of both U and V
    // so that V stays in SO(d) and sigma stays non-negative.
    if det_cm(d, &v_sorted) < 0.0 {
        let mut v_fixed = v_sorted;
        for r in 0..d {
            v_fixed[(d - 1) * d + r] = -v_fixed[(d - 1) * d + r];
        }
        let mut u_fixed = u;
        for r in 0..d {
            u_fixed[(d - 1) * d + r] = -u_fixed[(d - 1) * d + r];
        }
        return (to_row_major(d, &u_fixed), s_sorted, to_row_major(d, &v_fixed));
    }

    (to_row_major(d, &u), s_sorted, to_row_major(d, &v_sorted))
}

fn det_cm(d: usize, m: &[f64; 9]) -> f64 {
    match d {
        2 => m[0] * m[3] - m[2] * m[1],
        3 => {
            m[0] * (m[4] * m[8] - m[7] * m[5]) - m[3] * (m[1] * m[8] - m[7] * m[2])
                + m[6] * (m[1] * m[5] - m[4] * m[2])
        }
        _ => unreachable!(),
    }
}

fn to_row_major(d: usize, cm: &[f64; 9]) -> [f64; 9] {
    let mut rm = [0.0f64; 9];
    for c in 0..d {
        for r in 0..d {
            rm[r * d + c] = cm[c * d + r];
        }
    }
    rm
}

/// Replaces column `i` with a unit vector orthogonal to the other columns.
fn complete_column(d: usize, u: &mut [f64; 9], i: usize) {
    if d == 2 {
        let j = 1 - i;
        // Perpendicular of the other column (rotate by 90 degrees).
        let (x, y) = (u[j * 2], u[j * 2 + 1]);
        let n = (x * x + y * y).sqrt();
        if n > 0.0 {
            u[i * 2] = -y / n;
            u[i * 2 + 1] = x / n;
        } else {
            u[i * 2] = if i == 0 { 1.0 } else { 0.0 };
            u[i * 2 + 1] = if i == 0 { 0.0 } else { 1.0 };
        }
        return;
    }
    // d == 3: try cross products of the other two columns, then fall back
    // to Gram-Schmidt against whatever is nonzero.
    let others: Vec<usize> = (0..3).filter(|&c| c != i).collect();
    let a = Vector3::new(u[others[0] * 3], u[others[0] * 3 + 1], u[others[0] * 3 + 2]);
    let b = Vector3::new(u[others[1] * 3], u[others[1] * 3 + 1], u[others[1] * 3 + 2]);
    let mut cand = a.cross(&b);
    if cand.norm() < 1e-12 {
        for basis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            let mut w = basis;
            if a.norm() > 0.0 {
                w -= a * (a.dot(&w) / a.norm_squared());
            }
            if b.norm() > 0.0 {
                w -= b * (b.dot(&w) / b.norm_squared());
            }
            if w.norm() > 1e-6 {
                cand = w;
                break;
            }
        }
    }
    let cand = cand.normalize();
    u[i * 3] = cand.x;
    u[i * 3 + 1] = cand.y;
    u[i * 3 + 2] = cand.z;
}

/// SVD of a 3x3 matrix: J = U * diag(sigma) * V^T, sigma descending.
pub fn svd3(j: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let flat: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| j[(r, c)]).collect();
    let (u, s, v) = svd_flat(3, &flat);
    (
        Matrix3::from_row_slice(&u),
        Vector3::new(s[0], s[1], s[2]),
        Matrix3::from_row_slice(&v),
    )
}

/// SVD of a 2x2 matrix: J = U * diag(sigma) * V^T, sigma descending.
pub fn svd2(j: &Matrix2<f64>) -> (Matrix2<f64>, Vector2<f64>, Matrix2<f64>) {
    let flat = [j[(0, 0)], j[(0, 1)], j[(1, 0)], j[(1, 1)]];
    let (u, s, v) = svd_flat(2, &flat);
    (
        Matrix2::new(u[0], u[1], u[2], u[3]),
        Vector2::new(s[0], s[1]),
        Matrix2::new(v[0], v[1], v[2], v[3]),
    )
}
