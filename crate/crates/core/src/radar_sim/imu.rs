use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::trajectory::interpolate_pose;
use super::SimError;
use crate::geometry::{Timestamped, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Body-frame angular rate (rad/s).
    pub angular_velocity: Vec3,
    /// Body-frame specific force without gravity (m/s²).
    pub linear_acceleration: Vec3,
}

impl ImuSample {
    pub fn to_array(&self) -> [f64; 6] {
        let (w, a) = (self.angular_velocity, self.linear_acceleration);
        [w.x, w.y, w.z, a.x, a.y, a.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuErrorModel {
    pub gyro_bias: Vec3,
    /// Per-axis white noise σ of each gyro sample (rad/s).
    pub gyro_noise: Vec3,
    pub accel_bias: Vec3,
    pub accel_noise: Vec3,
}

impl Default for ImuErrorModel {
    fn default() -> Self {
        Self {
            gyro_bias: Vec3::new(0.002, -0.001, 0.004),
            gyro_noise: Vec3::repeat(0.005),
            accel_bias: Vec3::new(0.02, -0.015, 0.01),
            accel_noise: Vec3::repeat(0.05),
        }
    }
}

impl ImuErrorModel {
    pub fn zero() -> Self {
        Self { gyro_bias: Vec3::zeros(), gyro_noise: Vec3::zeros(), accel_bias: Vec3::zeros(), accel_noise: Vec3::zeros() }
    }
}

/// IMU samples at `rate` Hz along `traj`.
///
/// Angular rate sample `k` is the body-frame rotation from sample `k−1` to
/// `k` divided by the interval, so integrating samples over `(t_a, t_b]`
/// reproduces the orientation change over that span. Acceleration is the
/// central second difference of position rotated into the body frame.
/// Gravity is not included.
pub fn simulate_imu(
    traj: &[Timestamped<crate::geometry::Pose>],
    rate: f64,
    errors: &ImuErrorModel,
    rng_seed: u64,
) -> Result<Vec<ImuSample>, SimError> {
    if traj.len() < 2 {
        return Err(SimError::InsufficientTrajectory(traj.len()));
    }
    if let Some(i) = traj.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return Err(SimError::NonMonotonicTimestamps(i + 1));
    }
    if !(rate > 0.0) {
        return Err(SimError::Configuration("IMU rate must be positive".into()));
    }
    let t0 = traj[0].t;
    let t1 = traj.last().unwrap().t;
    let dt = 1.0 / rate;
    let n = ((t1 - t0) / dt + 1e-9).floor() as usize + 1;
    let poses: Vec<_> = (0..n).map(|k| interpolate_pose(traj, t0 + k as f64 * dt)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut gauss = |sigma: &Vec3| {
        let mut out = Vec3::zeros();
        for i in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            out[i] = sigma[i] * z;
        }
        out
    };

    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let omega = if n < 2 {
            Vec3::zeros()
        } else {
            let (a, b) = if k == 0 { (0, 1) } else { (k - 1, k) };
            let rel = poses[a].orientation.conjugate().multiply(&poses[b].orientation);
            rel.to_rotation_vector() / dt
        };
        let accel_world = if n < 3 {
            Vec3::zeros()
        } else {
            let c = k.clamp(1, n - 2);
            (poses[c + 1].position - 2.0 * poses[c].position + poses[c - 1].position) / (dt * dt)
        };
        let accel = poses[k].orientation.conjugate().rotate(&accel_world);
        let gyro_noise = gauss(&errors.gyro_noise);
        let accel_noise = gauss(&errors.accel_noise);
        samples.push(ImuSample {
            t: t0 + k as f64 * dt,
            angular_velocity: omega + errors.gyro_bias + gyro_noise,
            linear_acceleration: accel + errors.accel_bias + accel_noise,
        });
    }
    Ok(samples)
}
