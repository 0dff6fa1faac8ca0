//! Screw-axis parameterizations and exponential maps for rigid motion in
//! 3D, plus the 2D pivot-rotation analog.
//!
//! A screw axis S = (r; v) packs an axis-angle rotation r (theta = |r|,
//! axis r/theta) and a linear part v. Exponentiating gives a rotation
//! R = exp([r]x) by Rodrigues' formula and a translation p = G v, so a
//! point maps as x' = R x + p. All coefficient functions switch to
//! two-term Taylor expansions below theta = 1e-6, where the closed forms
//! are 0/0.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

/// Angle below which sin/cos coefficient ratios use Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Screw axis (r; v): axis-angle rotation plus linear part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrewAxis3 {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl ScrewAxis3 {
    pub fn new(r: Vector3<f64>, v: Vector3<f64>) -> Self {
        ScrewAxis3 { r, v }
    }

    pub fn zero() -> Self {
        ScrewAxis3 {
            r: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    pub fn negated(&self) -> Self {
        ScrewAxis3 {
            r: -self.r,
            v: -self.v,
        }
    }
}

/// Rotation plus translation; the exponential of a screw axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform3 {
    pub fn identity() -> Self {
        RigidTransform3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform3 {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn compose(&self, other: &RigidTransform3) -> RigidTransform3 {
        RigidTransform3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform3 {
        let rt = self.rotation.transpose();
        RigidTransform3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Planar rigid motion as (angle, pivot, translation): rotate about the
/// pivot, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2Params {
    pub angle: f64,
    pub pivot: Vector2<f64>,
    pub translation: Vector2<f64>,
}

/// Cross-product matrix: skew(a) * b == a x b.
pub fn skew(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -x.z, x.y, //
        x.z, 0.0, -x.x, //
        -x.y, x.x, 0.0,
    )
}

/// Rodrigues' formula: exp([r]x) = I + (sin t / t) [r]x + ((1 - cos t)/t^2) [r]x^2.
pub fn exp_so3(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let k = skew(r);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        // (1 - cos t)/t^2 as 2 sin^2(t/2)/t^2: free of the 1 - cos
        // cancellation that loses ~4 digits right above the switch.
        let t2 = theta * theta;
        let sh = (theta / 2.0).sin();
        (theta.sin() / theta, 2.0 * sh * sh / t2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Translation of the screw motion: p = G v with
/// G = I + ((1 - cos t)/t^2) [r]x + ((t - sin t)/t^3) [r]x^2.
pub fn screw_translation(r: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let theta = r.norm();
    let k = skew(r);
    let (b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        let sh = (theta / 2.0).sin();
        (2.0 * sh * sh / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let g = Matrix3::identity() + k * b + k * k * c;
    g * v
}

/// Exponential of a screw axis: rotation by Rodrigues, translation p = G v.
pub fn exp_se3(s: &ScrewAxis3) -> RigidTransform3 {
    RigidTransform3 {
        rotation: exp_so3(&s.r),
        translation: screw_translation(&s.r, &s.v),
    }
}

/// Applies a planar rigid motion: x' = R(angle) (x - pivot) + pivot + t.
pub fn apply_se2(q: &Se2Params, x: &Vector2<f64>) -> Vector2<f64> {
    let (s, c) = q.angle.sin_cos();
    let rot = Matrix2::new(c, -s, s, c);
    rot * (x - q.pivot) + q.pivot + q.translation
}
