//! SO(3) / so(3) primitives.
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors are axis–angle
//! coordinates in R³ and angular velocities are body-frame, so that a
//! trajectory obeys `Ṙ = R [ω]×`.
//!
//! Relative logarithm convention: `log_rel(a, b) = Log(aᵀ b)`, i.e. the body
//! frame rotation carrying `a` onto `b` (`b = a · Exp(log_rel(a, b))`).

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis–angle coordinates of so(3), radians.
pub type TangentVector = Vector3<f64>;
/// Body-frame angular velocity, rad/s.
pub type AngularVelocity = Vector3<f64>;

/// Residual bound for accepting a matrix as a rotation.
pub const ROTATION_TOL: f64 = 1e-9;
/// Below this angle exp/log switch to their Taylor branches.
pub const SMALL_ANGLE: f64 = 1e-7;
/// Rotations whose angle is at least `π - ANTIPODAL_MARGIN` have no unique log.
pub const ANTIPODAL_MARGIN: f64 = 1e-6;
const SKEW_TOL: f64 = 1e-8;
const QUATERNION_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("matrix is not skew-symmetric (|S + Sᵀ| = {residual:e})")]
    NotSkewSymmetric { residual: f64 },
    #[error("rotation angle {angle} is too close to π for a unique logarithm")]
    NearAntipodal { angle: f64 },
    #[error("not a rotation matrix (orthonormality residual {orthonormality:e}, det {det})")]
    NotARotation { orthonormality: f64, det: f64 },
    #[error("quaternion norm {norm} deviates from 1 by more than {QUATERNION_NORM_TOL:e}")]
    BadQuaternion { norm: f64 },
    #[error("non-finite input")]
    NonFinite,
    #[error("{0}")]
    Domain(String),
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and orientation before wrapping.
    pub fn new(m: Matrix3<f64>) -> Result<Self, So3Error> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(So3Error::NonFinite);
        }
        let orthonormality = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if orthonormality > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(So3Error::NotARotation { orthonormality, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps `m` without checks. Callers guarantee `m ∈ SO(3)`.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Builds a rotation from a `(w, x, y, z)` quaternion, renormalizing it.
    pub fn from_quaternion_wxyz(q: [f64; 4]) -> Result<Self, So3Error> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(So3Error::NonFinite);
        }
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = raw.norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(So3Error::BadQuaternion { norm });
        }
        let unit = UnitQuaternion::from_quaternion(raw);
        Ok(Rotation(*unit.to_rotation_matrix().matrix()))
    }

    /// Unit quaternion `(w, x, y, z)` with `w ≥ 0`.
    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let unit = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        let q = unit.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Column `i` of the matrix, i.e. the image of the i-th world axis.
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.0.column(i).into_owned()
    }

    /// Frobenius norm of `RᵀR - I`.
    pub fn orthonormality_residual(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    /// One Newton step of the polar decomposition; removes first-order drift.
    pub fn reprojected(&self) -> Self {
        let m = self.0;
        Rotation(0.5 * m * (3.0 * Matrix3::identity() - m.transpose() * m))
    }

    /// Rotation angle `θ(R) ∈ [0, π]`.
    pub fn angle(&self) -> f64 {
        let w = skew_part(&self.0);
        let sin = 0.5 * w.norm();
        let cos = 0.5 * (self.0.trace() - 1.0);
        sin.atan2(cos)
    }
}

/// Serialized as a unit quaternion `[w, x, y, z]`.
impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_quaternion_wxyz().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let q = <[f64; 4]>::deserialize(d)?;
        Rotation::from_quaternion_wxyz(q).map_err(serde::de::Error::custom)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// `(R - Rᵀ)^∨`
fn skew_part(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(s: &Matrix3<f64>) -> Result<Vector3<f64>, So3Error> {
    let residual = (s + s.transpose()).norm();
    if !(residual < SKEW_TOL) {
        return Err(So3Error::NotSkewSymmetric { residual });
    }
    Ok(Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)]))
}

pub fn exp_map(v: &TangentVector) -> Rotation {
    let theta = v.norm();
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / (theta * theta))
    };
    let k = hat(v);
    Rotation(Matrix3::identity() + a * k + b * (k * k))
}

pub fn log_map(r: &Rotation) -> Result<TangentVector, So3Error> {
    let w = skew_part(&r.0);
    let sin = 0.5 * w.norm();
    let cos = 0.5 * (r.0.trace() - 1.0);
    let theta = sin.atan2(cos);
    if theta >= PI - ANTIPODAL_MARGIN {
        return Err(So3Error::NearAntipodal { angle: theta });
    }
    if theta < SMALL_ANGLE {
        return Ok(0.5 * w);
    }
    Ok(w * (theta / (2.0 * sin)))
}

/// `Log(aᵀ b)`; its norm is the geodesic distance between `a` and `b`.
pub fn log_rel(a: &Rotation, b: &Rotation) -> Result<TangentVector, So3Error> {
    log_map(&Rotation(a.0.transpose() * b.0))
}

/// Geodesic distance between two rotations, valid on all of SO(3).
pub fn distance(a: &Rotation, b: &Rotation) -> f64 {
    Rotation(a.0.transpose() * b.0).angle()
}

pub fn slerp(a: &Rotation, b: &Rotation, s: f64) -> Result<Rotation, So3Error> {
    if !(0.0..=1.0).contains(&s) {
        return Err(So3Error::Domain(format!("slerp fraction {s} outside [0, 1]")));
    }
    if s == 0.0 {
        return Ok(*a);
    }
    if s == 1.0 {
        return Ok(*b);
    }
    let step = log_rel(a, b)?;
    Ok(a * &exp_map(&(step * s)))
}

/// Angle between two nonzero vectors, accurate near 0 and π.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Tangent-space (Karcher) mean of a set of rotations.
pub fn karcher_mean(rotations: &[Rotation]) -> Result<Rotation, So3Error> {
    let first = rotations
        .first()
        .ok_or_else(|| So3Error::Domain("mean of an empty set".into()))?;
    let mut mean = *first;
    for _ in 0..50 {
        let mut acc = Vector3::zeros();
        for r in rotations {
            acc += log_rel(&mean, r)?;
        }
        acc /= rotations.len() as f64;
        mean = &mean * &exp_map(&acc);
        if acc.norm() < 1e-14 {
            break;
        }
    }
    Ok(mean)
}
