//! Rigid-body primitives shared by every stage of the pipeline.
//!
//! Quaternions use the Hamilton convention with the scalar stored first,
//! `(w, x, y, z)`. A [`Pose`] maps points from its local (sensor/body) frame
//! into the parent (world) frame: `x_world = R(q) x_local + p`.

use std::fmt;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Three-vector used for positions (m), velocities (m/s) and rates (rad/s).
pub type Vec3 = Vector3<f64>;

/// Largest tolerated deviation from unit norm before a pose is rejected.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cannot normalize a zero-norm quaternion")]
    DegenerateQuaternion,
    #[error("orientation is not unit norm (|q| = {norm})")]
    InvalidPose { norm: f64 },
}

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl fmt::Debug for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Quaternion({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Unit quaternion rotating by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Exponential map of a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order expansion keeps the map smooth through zero
            let h = 0.5;
            return Self::new(1.0 - angle * angle / 8.0, h * v.x, h * v.y, h * v.z);
        }
        Self::from_axis_angle(v, angle)
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), yaw)
    }

    /// Logarithm map: rotation vector of a unit quaternion, taken on the short
    /// side of the double cover.
    pub fn to_rotation_vector(&self) -> Vec3 {
        let q = if self.w < 0.0 { -*self } else { *self };
        let v = q.vector();
        let s = v.norm();
        if s < 1e-12 {
            return 2.0 * v / q.w.max(f64::MIN_POSITIVE);
        }
        let angle = 2.0 * s.atan2(q.w);
        v * (angle / s)
    }

    /// Heading about +z for planar motion.
    pub fn yaw(&self) -> f64 {
        (2.0 * (self.w * self.z + self.x * self.y))
            .atan2(1.0 - 2.0 * (self.y * self.y + self.z * self.z))
    }

    pub fn norm_squared(&self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn multiply(&self, rhs: &Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Unit-norm copy with `w >= 0`.
    pub fn normalize(&self) -> Result<Self, GeometryError> {
        Ok(self.normalize_raw()?.canonical())
    }

    /// Unit-norm copy keeping the sign of the input. Sigma-point arithmetic
    /// needs this form: flipping one member of a set breaks averaging.
    pub fn normalize_raw(&self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::DegenerateQuaternion);
        }
        Ok(self.scale(1.0 / n))
    }

    /// Representative of the double cover with a non-negative scalar part.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            -*self
        } else {
            *self
        }
    }

    pub fn inverse(&self) -> Self {
        self.conjugate().scale(1.0 / self.norm_squared())
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    fn ensure_unit(&self) -> Result<(), GeometryError> {
        if self.is_unit() {
            Ok(())
        } else {
            Err(GeometryError::InvalidPose { norm: self.norm() })
        }
    }

    /// Rotation matrix of a unit quaternion.
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

    /// Unit quaternion from a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = 2.0 * (trace + 1.0).sqrt();
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalize().unwrap_or(Self::IDENTITY)
    }

    /// Rotate a vector by a unit quaternion.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        // v' = v + 2w(u × v) + 2u × (u × v)
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    /// Spherical linear interpolation on the short arc.
    pub fn slerp(&self, other: &Quaternion, s: f64) -> Self {
        let mut b = *other;
        let mut cos = self.dot(&b);
        if cos < 0.0 {
            b = -b;
            cos = -cos;
        }
        if cos > 1.0 - 1e-12 {
            let q = Self::new(
                self.w + s * (b.w - self.w),
                self.x + s * (b.x - self.x),
                self.y + s * (b.y - self.y),
                self.z + s * (b.z - self.z),
            );
            return q.normalize_raw().unwrap_or(*self);
        }
        let theta = cos.acos();
        let sin = theta.sin();
        let wa = ((1.0 - s) * theta).sin() / sin;
        let wb = (s * theta).sin() / sin;
        Self::new(
            wa * self.w + wb * b.w,
            wa * self.x + wb * b.x,
            wa * self.y + wb * b.y,
            wa * self.z + wb * b.z,
        )
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, rhs: Quaternion) -> Quaternion {
        self.multiply(&rhs)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Hamilton product. Free-function form of [`Quaternion::multiply`].
pub fn quat_multiply(a: &Quaternion, b: &Quaternion) -> Quaternion {
    a.multiply(b)
}

/// Normalize and canonicalize (`w >= 0`).
pub fn quat_normalize(q: &Quaternion) -> Result<Quaternion, GeometryError> {
    q.normalize()
}

/// Geodesic angle between two orientations, in `[0, π]`.
pub fn rotation_angle_between(a: &Quaternion, b: &Quaternion) -> Result<f64, GeometryError> {
    a.ensure_unit()?;
    b.ensure_unit()?;
    // fixed argument order makes the result bit-symmetric
    let (a, b) = if a.to_array() <= b.to_array() { (a, b) } else { (b, a) };
    let d = a.dot(b).abs().min(1.0);
    // 2·atan2(|a⁻¹b|_vec, |w|) is better conditioned than 2·acos(d) near zero
    // vector part of a⁻¹b, grouped so that b = ±a cancels exactly
    let (av, bv) = (a.vector(), b.vector());
    let s = ((bv * a.w - av * b.w) - av.cross(&bv)).norm();
    let angle = 2.0 * s.atan2(d);
    Ok(angle.min(std::f64::consts::PI))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quaternion,
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: Vector3::new(0.0, 0.0, 0.0),
        orientation: Quaternion::IDENTITY,
    };

    pub fn new(position: Vec3, orientation: Quaternion) -> Self {
        Self { position, orientation }
    }

    /// Planar pose at `(x, y, 0)` with heading `yaw`.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self::new(Vec3::new(x, y, 0.0), Quaternion::from_yaw(yaw))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.orientation.ensure_unit()
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation.rotate(&other.position),
            orientation: self.orientation.multiply(&other.orientation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.orientation.conjugate();
        Pose {
            position: -qi.rotate(&self.position),
            orientation: qi,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.orientation.rotate(p) + self.position
    }

    /// Pose perturbed by a translation and a world-frame rotation vector
    /// about its own origin: `R' = Exp(dθ)·R`, `p' = p + dp`.
    pub fn retract(&self, dp: &Vec3, dtheta: &Vec3) -> Pose {
        let dq = Quaternion::from_rotation_vector(dtheta);
        let q = dq.multiply(&self.orientation).normalize_raw().unwrap_or(self.orientation);
        Pose::new(self.position + dp, q)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix()
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Result<Pose, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(a.compose(b))
}

pub fn pose_inverse(a: &Pose) -> Result<Pose, GeometryError> {
    a.validate()?;
    Ok(a.inverse())
}

pub fn transform_point(a: &Pose, p: &Vec3) -> Result<Vec3, GeometryError> {
    a.validate()?;
    Ok(a.transform_point(p))
}

/// Skew-symmetric cross-product matrix: `skew(a) b = a × b`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A value stamped with a time in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timestamped<T> {
    pub t: f64,
    pub value: T,
}

impl<T> Timestamped<T> {
    pub fn new(t: f64, value: T) -> Self {
        debug_assert!(t.is_finite() && t >= 0.0, "timestamp must be finite and non-negative");
        Self { t, value }
    }
}

pub type Trajectory = Vec<Timestamped<Pose>>;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn q_close(a: &Quaternion, b: &Quaternion, tol: f64) -> bool {
        a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_product() {
        let q = Quaternion::new(0.3, -0.2, 0.9, 0.1);
        assert_eq!(Quaternion::IDENTITY * q, q);
    }

    #[test]
    fn product_with_inverse_is_identity() {
        let q = Quaternion::new(0.3, -0.2, 0.9, 0.1);
        let r = q * q.conjugate().scale(1.0 / q.norm_squared());
        assert!(q_close(&r, &Quaternion::IDENTITY, 1e-15));
    }

    #[test]
    fn hand_expanded_product() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = Quaternion::new(h, h, 0.0, 0.0) * Quaternion::new(h, 0.0, h, 0.0);
        assert!(q_close(&r, &Quaternion::new(0.5, 0.5, 0.5, 0.5), 1e-15));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(Quaternion::new(2.0, 0.0, 0.0, 0.0).normalize().unwrap(), Quaternion::IDENTITY);
        let q = Quaternion::new(1.0, 1.0, 1.0, 1.0).normalize().unwrap();
        assert!(q_close(&q, &Quaternion::new(0.5, 0.5, 0.5, 0.5), 1e-15));
        assert_eq!(
            Quaternion::new(0.0, 0.0, 0.0, 0.0).normalize(),
            Err(GeometryError::DegenerateQuaternion)
        );
    }

    #[test]
    fn normalize_canonicalizes_sign() {
        let q = Quaternion::new(-1.0, 0.0, 0.0, 1.0).normalize().unwrap();
        assert!(q.w >= 0.0);
        assert_abs_diff_eq!(q.z, -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn pose_examples() {
        let p = Pose::new(Vec3::new(1.0, 2.0, 3.0), Quaternion::from_yaw(0.4));
        assert_eq!(pose_compose(&Pose::IDENTITY, &p).unwrap(), p);
        assert_eq!(pose_inverse(&Pose::IDENTITY).unwrap(), Pose::IDENTITY);
        let yaw90 = Pose::planar(0.0, 0.0, FRAC_PI_2);
        let out = transform_point(&yaw90, &Vec3::x()).unwrap();
        assert_abs_diff_eq!(out, Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn non_unit_pose_rejected() {
        let bad = Pose::new(Vec3::zeros(), Quaternion::new(1.1, 0.0, 0.0, 0.0));
        assert!(matches!(pose_compose(&bad, &Pose::IDENTITY), Err(GeometryError::InvalidPose { .. })));
        assert!(transform_point(&bad, &Vec3::x()).is_err());
        assert!(pose_inverse(&bad).is_err());
    }

    #[test]
    fn rotation_angle_examples() {
        let q = Quaternion::from_axis_angle(&Vec3::new(1.0, 2.0, -0.5), 1.1);
        assert_eq!(rotation_angle_between(&q, &q).unwrap(), 0.0);
        assert_eq!(rotation_angle_between(&q, &(-q)).unwrap(), 0.0);
        let a = rotation_angle_between(&Quaternion::IDENTITY, &Quaternion::from_yaw(FRAC_PI_2)).unwrap();
        assert_abs_diff_eq!(a, FRAC_PI_2, epsilon = 1e-15);
        let pi = rotation_angle_between(&Quaternion::IDENTITY, &Quaternion::from_yaw(PI)).unwrap();
        assert_abs_diff_eq!(pi, PI, epsilon = 1e-15);
        assert!(rotation_angle_between(&Quaternion::new(2.0, 0.0, 0.0, 0.0), &q).is_err());
    }

    #[test]
    fn rotation_matrix_round_trip() {
        let q = Quaternion::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 2.9);
        let back = Quaternion::from_rotation_matrix(&q.to_rotation_matrix());
        assert!(q_close(&back, &q.canonical(), 1e-12));
        let v = Vec3::new(0.1, -2.0, 4.0);
        assert_abs_diff_eq!(q.rotate(&v), q.to_rotation_matrix() * v, epsilon = 1e-12);
    }

    #[test]
    fn rotation_vector_round_trip() {
        let v = Vec3::new(0.4, -0.1, 1.3);
        assert_abs_diff_eq!(Quaternion::from_rotation_vector(&v).to_rotation_vector(), v, epsilon = 1e-12);
        let tiny = Vec3::new(1e-14, 0.0, -2e-14);
        assert_abs_diff_eq!(Quaternion::from_rotation_vector(&tiny).to_rotation_vector(), tiny, epsilon = 1e-20);
    }

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalize_raw().unwrap())
    }

    fn pose() -> impl Strategy<Value = Pose> {
        (unit_quat(), -50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64)
            .prop_map(|(q, x, y, z)| Pose::new(Vec3::new(x, y, z), q))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn multiplication_is_associative(a in unit_quat(), b in unit_quat(), c in unit_quat()) {
            let l = (a * b) * c;
            let r = a * (b * c);
            prop_assert!(q_close(&l, &r, 1e-12));
        }

        #[test]
        fn product_norm_is_multiplicative(a in unit_quat(), b in unit_quat(), s in 0.1..10.0f64) {
            let a = a.scale(s);
            prop_assert!(((a * b).norm() - a.norm() * b.norm()).abs() <= 1e-12 * s);
        }

        #[test]
        fn normalize_is_unit(a in unit_quat(), s in 1e-3..1e3f64) {
            let n = a.scale(s).normalize().unwrap();
            prop_assert!((n.norm() - 1.0).abs() <= 1e-12);
            prop_assert!(n.w >= 0.0);
        }

        #[test]
        fn pose_group_laws(a in pose(), b in pose(), p in (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64)) {
            let p = Vec3::new(p.0, p.1, p.2);
            let e = a.compose(&a.inverse());
            prop_assert!(e.position.norm() <= 1e-9);
            prop_assert!(rotation_angle_between(&e.orientation, &Quaternion::IDENTITY).unwrap() <= 1e-9);
            let lhs = a.compose(&b).transform_point(&p);
            let rhs = a.transform_point(&b.transform_point(&p));
            prop_assert!((lhs - rhs).norm() <= 1e-9);
            let id = Pose::IDENTITY.compose(&a);
            prop_assert!((id.position - a.position).norm() <= 1e-12);
        }

        #[test]
        fn rotation_angle_symmetric(a in unit_quat(), b in unit_quat()) {
            let ab = rotation_angle_between(&a, &b).unwrap();
            let ba = rotation_angle_between(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=PI).contains(&ab));
        }
    }
}
