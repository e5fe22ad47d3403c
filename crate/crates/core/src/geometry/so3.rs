//! Rotations, rigid poses and the SO(3) exponential/logarithm.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric matrix `[w]x` such that `[w]x v = w × v`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`]; reads the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    m: Matrix3<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Wraps a matrix, checking orthonormality and handedness to 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho < 1e-9 && (det - 1.0).abs() < 1e-9 {
            Ok(Self { m })
        } else {
            Err(Error::Invalid(format!(
                "not a rotation: orthogonality error {ortho:e}, det {det}"
            )))
        }
    }

    /// Wraps a matrix the caller guarantees is a rotation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self { m }
    }

    pub fn from_columns(x: Vector3<f64>, y: Vector3<f64>, z: Vector3<f64>) -> Result<Self> {
        Self::from_matrix(Matrix3::from_columns(&[x, y, z]))
    }

    /// Rodrigues' formula for `exp([w]x)`.
    pub fn exp(w: &Vector3<f64>) -> Self {
        let theta = w.norm();
        let k = hat(w);
        let (a, b) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
        };
        Self {
            m: Matrix3::identity() + k * a + k * k * b,
        }
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Roll-pitch-yaw (fixed-axis X, then Y, then Z).
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rx = Self::about_axis(&Vector3::x(), roll);
        let ry = Self::about_axis(&Vector3::y(), pitch);
        let rz = Self::about_axis(&Vector3::z(), yaw);
        rz * ry * rx
    }

    /// Axis-angle vector with norm in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        log_so3(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn transpose(&self) -> Self {
        Self { m: self.m.transpose() }
    }

    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.m.column(i).into_owned()
    }

    /// Geodesic angle between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).log().norm()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation { m: self.m * rhs.m }
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.m * rhs
    }
}

/// SO(3) logarithm returning the axis-angle vector `ω` with `exp([ω]x) = r`.
///
/// At exactly π the axis sign is ambiguous; the component of largest magnitude
/// is made positive.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let skew = vee(&(m - m.transpose())) * 0.5; // sin(θ)·n
    let sin_theta = skew.norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        return skew * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0);
    }
    if cos_theta > 0.0 || sin_theta > 1e-6 {
        return skew * (theta / sin_theta);
    }

    // Near π: symmetric part is (1 - cos θ) n nᵀ.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut n: Vector3<f64> = sym.column(best).into_owned();
    n /= n.norm();
    if sin_theta < 1e-12 {
        let imax = n.iamax();
        if n[imax] < 0.0 {
            n = -n;
        }
    } else if n.dot(&skew) < 0.0 {
        n = -n;
    }
    n * theta
}

/// Inverse of the right Jacobian of SO(3) evaluated at `phi`.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// A rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

/// Desired end-effector orientation for a handover approach.
///
/// The z-axis points from `ee` toward `hand`; the x-axis is the unit vector
/// orthogonal to z that points as far against `world_up` as possible.
pub fn desired_grasp_rotation(
    ee: &Vector3<f64>,
    hand: &Vector3<f64>,
    world_up: &Vector3<f64>,
) -> Result<Rotation> {
    let v = hand - ee;
    let len = v.norm();
    if len <= 1e-6 {
        return Err(Error::DegenerateDirection);
    }
    let z = v / len;
    let down = -world_up;
    let x_raw = down - z * z.dot(&down);
    let x_len = x_raw.norm();
    if x_len <= 1e-6 {
        return Err(Error::DegenerateDirection);
    }
    let x = x_raw / x_len;
    let y = z.cross(&x);
    Ok(Rotation::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])))
}
