//! Unit quaternions as a representation of SO(3).
//!
//! Convention: scalar-first `(w, x, y, z)`, Hamilton product, right-handed
//! frames. A quaternion `q` rotates a vector `v` as `q ⊗ (0, v) ⊗ q*`.
//! Angular velocities are world-frame rotation vectors: a path with constant
//! angular velocity `ω` satisfies `dq/dt = ½ ω ⊗ q`.

use std::f64::consts::PI;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Vector3};

/// Below this arc length SLERP falls back to normalized linear interpolation.
pub const SLERP_NLERP_THRESHOLD: f64 = 1e-8;

/// Rotation angles within this distance of π use the deterministic axis rule.
pub const HALF_TURN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

/// Axis-angle vector in the Lie algebra so(3), in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotVec(pub Vector3<f64>);

impl RotVec {
    pub fn new(vx: f64, vy: f64, vz: f64) -> Self {
        RotVec(Vector3::new(vx, vy, vz))
    }

    pub fn zeros() -> Self {
        RotVec(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        RotVec(self.0 * s)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the sign so that `w >= 0` (ties: the first
    /// nonzero imaginary component is positive).
    ///
    /// Panics if the input has zero or non-finite norm.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_raw(w, x, y, z).canonical()
    }

    /// Normalizes without touching the sign.
    pub fn from_raw(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(
            n.is_finite() && n > 0.0,
            "quaternion must have finite nonzero norm"
        );
        UnitQuat {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Shepperd's method; the result is canonicalized.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
            let s = 2.0 * (1.0 + trace).sqrt();
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::new(w, x, y, z)
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn imag(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &UnitQuat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn conj(&self) -> Self {
        UnitQuat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Representative with `w >= 0`; ties resolved by the first nonzero
    /// imaginary component being positive.
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            -self
        } else {
            self
        }
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // v' = v + 2 w (u × v) + 2 u × (u × v)
        let u = self.imag();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// True when both quaternions describe the same rotation within `tol`.
    pub fn same_rotation(&self, other: &UnitQuat, tol: f64) -> bool {
        (1.0 - self.dot(other).abs()) <= tol
    }
}

impl Neg for UnitQuat {
    type Output = UnitQuat;

    fn neg(self) -> UnitQuat {
        UnitQuat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// Hamilton product, renormalized to absorb rounding.
impl Mul for UnitQuat {
    type Output = UnitQuat;

    fn mul(self, b: UnitQuat) -> UnitQuat {
        let a = self;
        UnitQuat::from_raw(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// Arc length on S³ between `a` and `b`, computed without `acos` so it stays
/// accurate for nearly identical inputs.
fn arc_between(a: &UnitQuat, b: &UnitQuat) -> f64 {
    let diff = Vector4Like::sub(a, b).norm();
    let sum = Vector4Like::add(a, b).norm();
    2.0 * diff.atan2(sum)
}

struct Vector4Like([f64; 4]);

impl Vector4Like {
    fn sub(a: &UnitQuat, b: &UnitQuat) -> Self {
        Vector4Like([a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z])
    }
    fn add(a: &UnitQuat, b: &UnitQuat) -> Self {
        Vector4Like([a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z])
    }
    fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `q1` or `-q1`, whichever lies on the same hemisphere as `q0`.
pub fn antipodal_fix(q0: &UnitQuat, q1: &UnitQuat) -> UnitQuat {
    if q0.dot(q1) < 0.0 {
        -*q1
    } else {
        *q1
    }
}

/// Spherical linear interpolation along the shortest arc.
pub fn slerp(q0: &UnitQuat, q1: &UnitQuat, t: f64) -> UnitQuat {
    let q1 = antipodal_fix(q0, q1);
    let omega = arc_between(q0, &q1);
    if omega < SLERP_NLERP_THRESHOLD {
        return UnitQuat::from_raw(
            (1.0 - t) * q0.w + t * q1.w,
            (1.0 - t) * q0.x + t * q1.x,
            (1.0 - t) * q0.y + t * q1.y,
            (1.0 - t) * q0.z + t * q1.z,
        );
    }
    let s = omega.sin();
    let a = ((1.0 - t) * omega).sin() / s;
    let b = (t * omega).sin() / s;
    UnitQuat::from_raw(
        a * q0.w + b * q1.w,
        a * q0.x + b * q1.x,
        a * q0.y + b * q1.y,
        a * q0.z + b * q1.z,
    )
}

/// Logarithm map to the rotation vector with angle in `[0, π]`.
pub fn quat_log(q: &UnitQuat) -> RotVec {
    let q = q.canonical();
    let im = q.imag();
    let s = im.norm();
    if s < 1e-12 {
        // angle/sin(angle/2) → 2 as the angle → 0
        return RotVec(im * (2.0 / q.w));
    }
    let angle = 2.0 * s.atan2(q.w);
    if PI - angle <= HALF_TURN_TOLERANCE {
        let mut axis = im / s;
        let dominant = (0..3)
            .max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs()))
            .unwrap_or(0);
        if axis[dominant] < 0.0 {
            axis = -axis;
        }
        return RotVec(axis * angle);
    }
    RotVec(im * (angle / s))
}

/// Exponential map from a rotation vector; `exp(0)` is the identity.
pub fn quat_exp(v: &RotVec) -> UnitQuat {
    let angle = v.0.norm();
    let half = 0.5 * angle;
    // sin(half)/angle with a series near zero
    let k = if angle < 1e-6 {
        0.5 * (1.0 - half * half / 6.0 + half.powi(4) / 120.0)
    } else {
        half.sin() / angle
    };
    UnitQuat::new(half.cos(), k * v.0.x, k * v.0.y, k * v.0.z)
}

/// World-frame angular velocity of the SLERP path from `q0` to `q1` over unit
/// time: the rotation vector of `q1 ⊗ q0*`.
pub fn relative_angular_velocity(q0: &UnitQuat, q1: &UnitQuat) -> RotVec {
    let q1 = antipodal_fix(q0, q1);
    quat_log(&(q1 * q0.conj()))
}

/// Geodesic distance on SO(3) in radians, in `[0, π]`.
pub fn geodesic_distance(q0: &UnitQuat, q1: &UnitQuat) -> f64 {
    let rel = antipodal_fix(q0, q1) * q0.conj();
    2.0 * rel.imag().norm().atan2(rel.w.abs())
}

pub fn apply_rotation(q: &UnitQuat, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let m = q.to_rotation_matrix();
    points.iter().map(|p| m * p).collect()
}
