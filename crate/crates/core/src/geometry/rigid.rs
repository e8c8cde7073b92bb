//! Rotations and rigid transforms.
//!
//! Quaternions are stored as `[q0, q1, q2, q3]` with
//! `q = q3 + q0 i + q1 j + q2 k`: the vector part first, the scalar last.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::Vec3;
use crate::error::{Error, Result};

/// Norm below which a raw quaternion is rejected.
pub const QUAT_EPS: f64 = 1e-8;

/// Unit quaternion, components `[q0, q1, q2, q3]` (scalar `q3` last).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion([f64; 4]);

impl UnitQuaternion {
    pub const IDENTITY: Self = Self([0.0, 0.0, 0.0, 1.0]);

    /// Normalizes a raw 4-vector.
    pub fn normalize(raw: [f64; 4]) -> Result<Self> {
        let n = libm::sqrt(raw.iter().map(|v| v * v).sum());
        if !(n > QUAT_EPS) {
            return Err(Error::DegenerateQuaternion(n));
        }
        Ok(Self(raw.map(|v| v / n)))
    }

    /// Rotation of `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (libm::sin(angle / 2.0), libm::cos(angle / 2.0));
        Self([a.x * s, a.y * s, a.z * s, c])
    }

    /// Quaternion of a rotation matrix (Shepperd's method), scalar kept
    /// non-negative.
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let tr = r.trace();
        let q = if tr > 0.0 {
            let s = libm::sqrt(tr + 1.0) * 2.0;
            [(r[(2, 1)] - r[(1, 2)]) / s, (r[(0, 2)] - r[(2, 0)]) / s, (r[(1, 0)] - r[(0, 1)]) / s, 0.25 * s]
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = libm::sqrt(1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]) * 2.0;
            [0.25 * s, (r[(0, 1)] + r[(1, 0)]) / s, (r[(0, 2)] + r[(2, 0)]) / s, (r[(2, 1)] - r[(1, 2)]) / s]
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = libm::sqrt(1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]) * 2.0;
            [(r[(0, 1)] + r[(1, 0)]) / s, 0.25 * s, (r[(1, 2)] + r[(2, 1)]) / s, (r[(0, 2)] - r[(2, 0)]) / s]
        } else {
            let s = libm::sqrt(1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]) * 2.0;
            [(r[(0, 2)] + r[(2, 0)]) / s, (r[(1, 2)] + r[(2, 1)]) / s, 0.25 * s, (r[(1, 0)] - r[(0, 1)]) / s]
        };
        let q = if q[3] < 0.0 { q.map(|v| -v) } else { q };
        Self::normalize(q).unwrap_or(Self::IDENTITY)
    }

    /// Wraps components the caller has already checked to be unit length.
    pub fn from_components_unchecked(q: [f64; 4]) -> Self {
        Self(q)
    }

    pub fn components(&self) -> [f64; 4] {
        self.0
    }

    pub fn neg(&self) -> Self {
        Self(self.0.map(|v| -v))
    }

    /// Hamilton product `self · other`: the rotation applying `other` first.
    pub fn mul(&self, other: &Self) -> Self {
        let [ax, ay, az, aw] = self.0;
        let [bx, by, bz, bw] = other.0;
        let raw = [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ];
        // renormalize against drift
        Self::normalize(raw).unwrap_or(Self::IDENTITY)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(|v| v * v).sum())
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        quat_to_rot(self)
    }
}

/// Normalizes a raw network output into a unit quaternion.
pub fn normalize_quat(raw: [f64; 4]) -> Result<UnitQuaternion> {
    UnitQuaternion::normalize(raw)
}

/// Row-major entries of `R(q)` for `q = [q0, q1, q2, q3]`, written as
/// `I + 2·P(q)/‖q‖²` with `P` quadratic. For unit `q` this is the usual
/// matrix; the per-entry division makes axis-aligned quarter turns come out
/// exact, and every term is even in `q`, so `R(−q) = R(q)` bit for bit.
pub fn rot_entries(q: [f64; 4]) -> [f64; 9] {
    let [x, y, z, w] = q;
    let n2 = x * x + y * y + z * z + w * w;
    [
        1.0 - 2.0 * (y * y + z * z) / n2,
        2.0 * (x * y - z * w) / n2,
        2.0 * (x * z + y * w) / n2,
        2.0 * (x * y + z * w) / n2,
        1.0 - 2.0 * (x * x + z * z) / n2,
        2.0 * (y * z - x * w) / n2,
        2.0 * (x * z - y * w) / n2,
        2.0 * (y * z + x * w) / n2,
        1.0 - 2.0 * (x * x + y * y) / n2,
    ]
}

/// `∂R/∂q_c` for each component `c`, entries row-major.
pub fn rot_jacobian(q: [f64; 4]) -> [[f64; 9]; 4] {
    let n2: f64 = q.iter().map(|v| v * v).sum();
    let r = rot_entries(q);
    let [x, y, z, w] = q.map(|v| 2.0 * v);
    // derivative of the numerator 2·P(q)
    let dp = [
        [0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x],
        [-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y],
        [-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0],
        [0.0, -z, y, z, 0.0, -x, -y, x, 0.0],
    ];
    let mut out = [[0.0; 9]; 4];
    for c in 0..4 {
        for e in 0..9 {
            let p = if e % 4 == 0 { r[e] - 1.0 } else { r[e] };
            out[c][e] = (dp[c][e] - p * 2.0 * q[c]) / n2;
        }
    }
    out
}

pub fn quat_to_rot(q: &UnitQuaternion) -> Matrix3<f64> {
    Matrix3::from_row_slice(&rot_entries(q.0))
}

/// `T = [R | t]` mapping object-frame points to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_quat(q: &UnitQuaternion, translation: Vec3) -> Self {
        Self { rotation: q.to_rotation(), translation }
    }

    pub fn translation(t: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// `‖RᵀR − I‖∞` and `|det R − 1|`.
    pub fn so3_residuals(&self) -> (f64, f64) {
        so3_residuals(&self.rotation)
    }

    /// Checks the rotation against the SO(3) invariants within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (orth, det) = self.so3_residuals();
        if !(orth <= tol && det <= tol) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition(alloc::format!(
                "not a rigid transform (orthogonality residual {orth:e}, det residual {det:e})"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `(Rᵀ, −Rᵀt)`.
    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn quaternion(&self) -> UnitQuaternion {
        UnitQuaternion::from_rotation(&self.rotation)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.invert()
}

pub fn so3_residuals(r: &Matrix3<f64>) -> (f64, f64) {
    let e = r.transpose() * r - Matrix3::identity();
    let orth = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (orth, (r.determinant() - 1.0).abs())
}
