//! Unscented Kalman filter fusing the motion model, the gyro and
//! scan-to-map pose measurements, plus an IMU-only dead-reckoning baseline.

mod ukf;
pub mod ut;

pub use ukf::{ukf_correct, ukf_predict, InitialUncertainty, ProcessNoise, UkfConfig, UkfState, STATE_DIM};
pub use ut::{sigma_points, SigmaPoints, UtParams, UtWeights};

use nalgebra::{Matrix6, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Quaternion, Timestamped, Trajectory, Vec3};
use crate::motion_model::MotionError;
use crate::radar_sim::ImuSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("covariance is not positive semi-definite, even after jitter")]
    DegenerateCovariance,
    #[error("innovation covariance is not positive semi-definite (min eigenvalue {0:e}); update skipped")]
    InnovationNotPsd(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Bias-compensated first-order quaternion increment over `dt`.
pub fn gyro_increment(rate: &Vec3, bias: &Vec3, dt: f64) -> Quaternion {
    let h = (rate - bias) * (0.5 * dt);
    let q = Quaternion::new(1.0, h.x, h.y, h.z);
    q.scale(1.0 / q.norm())
}

/// Product of per-sample increments over a window spanning `dt` seconds.
pub fn integrate_gyro(window: &[ImuSample], bias: &Vec3, dt: f64) -> Quaternion {
    if window.is_empty() {
        return Quaternion::IDENTITY;
    }
    let h = dt / window.len() as f64;
    window.iter().fold(Quaternion::IDENTITY, |q, s| q.multiply(&gyro_increment(&s.angular_velocity, bias, h)))
}

/// A registered pose with covariance over `(position, body-frame rotation
/// vector)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMeasurement {
    pub pose: Pose,
    pub noise: Matrix6<f64>,
}

impl PoseMeasurement {
    pub fn isotropic(pose: Pose, position_sigma: f64, rotation_sigma: f64) -> Self {
        let mut noise = Matrix6::zeros();
        for i in 0..3 {
            noise[(i, i)] = position_sigma * position_sigma;
            noise[(i + 3, i + 3)] = rotation_sigma * rotation_sigma;
        }
        Self { pose, noise }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        self.pose.validate().map_err(|e| FusionError::InvalidInput(e.to_string()))?;
        if self.noise.iter().any(|v| !v.is_finite()) || (self.noise - self.noise.transpose()).abs().max() > 1e-12 {
            return Err(FusionError::InvalidInput("measurement noise must be finite and symmetric".into()));
        }
        let min = self.noise.symmetric_eigen().eigenvalues.min();
        if min < -1e-12 {
            return Err(FusionError::InvalidInput(format!("measurement noise has eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// Noise mapped to `(position, quaternion)` coordinates around `q`.
    pub(crate) fn noise7(&self, q: &Quaternion) -> SMatrix<f64, 7, 7> {
        // dq = ½ [q]_L (0, δθ) for a body-frame perturbation δθ
        let g = SMatrix::<f64, 4, 3>::from_row_slice(&[
            -q.x, -q.y, -q.z, //
            q.w, -q.z, q.y, //
            q.z, q.w, -q.x, //
            -q.y, q.x, q.w,
        ]) * 0.5;
        let mut j = SMatrix::<f64, 7, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        j.fixed_view_mut::<4, 3>(3, 3).copy_from(&g);
        j * self.noise * j.transpose()
    }
}

/// Integrates the IMU alone: gyro for orientation, rotated accelerometer
/// twice for position. One pose per IMU sample, starting at `initial`.
pub fn dead_reckon(imu: &[ImuSample], initial: &Timestamped<Pose>, initial_velocity: &Vec3) -> Result<Trajectory, FusionError> {
    if imu.len() < 2 {
        return Err(FusionError::InvalidInput("dead reckoning needs at least two IMU samples".into()));
    }
    let mut out = Vec::with_capacity(imu.len() + 1);
    out.push(initial.clone());
    let (mut p, mut q, mut v) = (initial.value.position, initial.value.orientation, *initial_velocity);
    let mut t = initial.t;
    for s in imu.iter().filter(|s| s.t > initial.t) {
        let dt = s.t - t;
        t = s.t;
        q = q.multiply(&Quaternion::from_rotation_vector(&(s.angular_velocity * dt))).normalize().expect("unit increment");
        let a = q.rotate(&s.linear_acceleration);
        p += v * dt + a * (0.5 * dt * dt);
        v += a * dt;
        out.push(Timestamped::new(t, Pose::new(p, q)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar_sim::{generate_trajectory, interpolate_pose, simulate_imu, velocity_at, ImuErrorModel, TrajectoryKind, TrajectoryParams};
    use approx::assert_abs_diff_eq;

    #[test]
    fn increment_examples() {
        let a = Vec3::new(0.3, -0.2, 0.1);
        assert_eq!(gyro_increment(&a, &a, 0.05), Quaternion::IDENTITY);
        let q = gyro_increment(&Vec3::new(0.1, 0.0, 0.0), &Vec3::zeros(), 0.05);
        let n = (1.0f64 + 0.0025 * 0.0025).sqrt();
        assert_abs_diff_eq!(q.w, 1.0 / n, epsilon = 1e-15);
        assert_abs_diff_eq!(q.x, 0.0025 / n, epsilon = 1e-15);
    }

    #[test]
    fn successive_increments_match_exponential() {
        let dt = 0.01;
        let (w1, w2) = (Vec3::new(0.2, -0.1, 0.4), Vec3::new(0.25, -0.05, 0.35));
        let two = gyro_increment(&w1, &Vec3::zeros(), dt).multiply(&gyro_increment(&w2, &Vec3::zeros(), dt));
        let exp = Quaternion::from_rotation_vector(&((w1 + w2) * dt));
        let err = crate::geometry::rotation_angle_between(&two, &exp).unwrap();
        assert!(err < dt * dt, "{err}");
    }

    #[test]
    fn measurement_noise_maps_to_tangent_space() {
        let q = Quaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7);
        let m = PoseMeasurement::isotropic(Pose::new(Vec3::zeros(), q), 0.1, 0.2);
        let r = m.noise7(&q);
        let qv = nalgebra::Vector4::new(q.w, q.x, q.y, q.z);
        let rq = r.fixed_view::<4, 4>(3, 3);
        assert!((rq * qv).norm() < 1e-15);
        // isotropic rotation noise: ¼σ² on the tangent plane
        let tangent = nalgebra::Matrix4::identity() - qv * qv.transpose();
        assert!((rq - tangent * (0.25 * 0.04)).abs().max() < 1e-15);
        assert_abs_diff_eq!(r[(0, 0)], 0.01, epsilon = 1e-15);
        assert!(PoseMeasurement::isotropic(Pose::default(), -1.0, 0.0).validate().is_ok());
    }

    fn zero_imu(n: usize, rate: f64) -> Vec<ImuSample> {
        (1..=n).map(|i| ImuSample { t: i as f64 / rate, angular_velocity: Vec3::zeros(), linear_acceleration: Vec3::zeros() }).collect()
    }

    #[test]
    fn dead_reckon_static_and_yaw() {
        let start = Timestamped::new(0.0, Pose::planar(1.0, 2.0, 0.3));
        let out = dead_reckon(&zero_imu(100, 100.0), &start, &Vec3::zeros()).unwrap();
        assert_eq!(out.len(), 101);
        for s in &out {
            assert_abs_diff_eq!(s.value.position, start.value.position, epsilon = 1e-12);
            assert!(crate::geometry::rotation_angle_between(&s.value.orientation, &start.value.orientation).unwrap() < 1e-12);
        }

        let mut imu = zero_imu(200, 100.0);
        imu.iter_mut().for_each(|s| s.angular_velocity.z = 0.4);
        let out = dead_reckon(&imu, &Timestamped::new(0.0, Pose::default()), &Vec3::zeros()).unwrap();
        for s in &out {
            assert_abs_diff_eq!(s.value.orientation.yaw(), 0.4 * s.t, epsilon = 1e-9);
        }
        assert!(dead_reckon(&imu[..1], &start, &Vec3::zeros()).is_err());
    }

    #[test]
    fn dead_reckoning_diverges_superlinearly() {
        let params = TrajectoryParams { rate: 400.0, length: 32.0, ..Default::default() };
        let truth = generate_trajectory(TrajectoryKind::Random, &params).unwrap();
        assert!(truth.last().unwrap().t >= 60.0);
        let imu = simulate_imu(&truth, 400.0, &ImuErrorModel::default(), 5).unwrap();
        let v0 = velocity_at(&truth, 0.0, 1e-3);
        let est = dead_reckon(&imu, &truth[0], &v0).unwrap();
        let err_at = |t: f64| {
            let e = est.iter().min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs())).unwrap();
            (e.value.position - interpolate_pose(&truth, e.t).position).norm()
        };
        let (e6, e60) = (err_at(6.0), err_at(60.0));
        assert!(e60 > 10.0 * e6, "error {e6} m at 6 s, {e60} m at 60 s");
    }
}
