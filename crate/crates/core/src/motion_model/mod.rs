//! Transition models for the filter's position term: constant velocity and
//! a bi-directional LSTM driven by the inter-frame IMU window.
//!
//! The LSTM predicts `u`, the body-frame displacement per metre of forward
//! travel over the window. The filter scales it by the forward speed
//! `v · heading(q)` and rotates it into the world, so the network handles
//! the shape of the motion while speed and heading stay in the state.

pub mod lstm;
pub mod train;

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Quaternion, Vec3};
use crate::radar_sim::ImuSample;
use lstm::{lstm_forward, LstmParams, INPUT_DIM, OUTPUT_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("model file {path}: {message}")]
    File { path: String, message: String },
}

/// Everything a transition model may look at for one frame.
#[derive(Clone, Debug)]
pub struct MotionModelInput<'a> {
    pub imu_window: &'a [ImuSample],
    pub orientation: Quaternion,
    pub velocity: Vec3,
    pub gyro_bias: Vec3,
    pub dt: f64,
}

/// Constant-velocity displacement `v·dt`.
pub fn cv_predict(input: &MotionModelInput) -> Vec3 {
    input.velocity * input.dt
}

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Statistics of `rows`; channels with (near) zero spread get unit std.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let groups: Vec<_> = (0..dim).map(|k| k..k + 1).collect();
        Self::fit_grouped(rows, dim, &groups)
    }

    /// Like `fit`, but every channel of a group shares the largest std in
    /// that group, so channels of one sensor keep their relative scale.
    /// Channels outside all groups keep their own std.
    pub fn fit_grouped<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize, groups: &[Range<usize>]) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for k in 0..dim {
                let d = row[k] - mean[k];
                mean[k] += d / n as f64;
                m2[k] += d * (row[k] - mean[k]);
            }
        }
        let mut std: Vec<f64> = m2.iter().map(|s| if n > 1 { (s / (n - 1) as f64).sqrt() } else { 0.0 }).collect();
        for g in groups {
            let s = std[g.clone()].iter().cloned().fold(0.0, f64::max);
            std[g.clone()].iter_mut().for_each(|v| *v = s);
        }
        for v in &mut std {
            if *v <= 1e-9 {
                *v = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.mean.len() {
            out[k] = (x[k] - self.mean[k]) / self.std[k];
        }
    }

    pub fn invert(&self, y: &[f64], out: &mut [f64]) {
        for k in 0..self.mean.len() {
            out[k] = y[k] * self.std[k] + self.mean[k];
        }
    }
}

/// Network input channels: bias-corrected gyro then acceleration.
pub fn imu_channels(s: &ImuSample, gyro_bias: &Vec3) -> [f64; INPUT_DIM] {
    let w = s.angular_velocity - gyro_bias;
    let a = s.linear_acceleration;
    [w.x, w.y, w.z, a.x, a.y, a.z]
}

/// The last `len` samples at or before `t`, left-padded with the earliest
/// available sample when the stream is too short.
pub fn imu_window(imu: &[ImuSample], t: f64, len: usize) -> Vec<ImuSample> {
    let end = imu.partition_point(|s| s.t <= t + 1e-9);
    if end == 0 || len == 0 {
        return Vec::new();
    }
    let start = end.saturating_sub(len);
    let mut out: Vec<ImuSample> = Vec::with_capacity(len);
    for _ in 0..len - (end - start) {
        out.push(imu[start]);
    }
    out.extend_from_slice(&imu[start..end]);
    out
}

/// A trained LSTM with the window length and normalization it was fit with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub format: String,
    pub version: u32,
    pub hidden: usize,
    pub window: usize,
    pub input_norm: Normalization,
    pub target_norm: Normalization,
    pub params: LstmParams,
    #[serde(default)]
    pub train_loss: Vec<f64>,
    #[serde(default)]
    pub validation_loss: Vec<f64>,
}

pub const MODEL_FORMAT: &str = "rio-lstm";
pub const MODEL_VERSION: u32 = 1;

impl LstmModel {
    pub fn validate(&self) -> Result<(), MotionError> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(MotionError::Shape(format!("unsupported model format {} v{}", self.format, self.version)));
        }
        self.params.validate()?;
        if self.params.hidden != self.hidden || self.window == 0 {
            return Err(MotionError::Shape("header does not match parameters".into()));
        }
        let ok = |n: &Normalization, d: usize| n.mean.len() == d && n.std.len() == d && n.std.iter().all(|s| *s > 0.0);
        if !ok(&self.input_norm, INPUT_DIM) || !ok(&self.target_norm, OUTPUT_DIM) {
            return Err(MotionError::Shape("normalization statistics have the wrong shape".into()));
        }
        Ok(())
    }

    /// Predicted body-frame displacement per unit forward travel.
    pub fn unit_displacement(&self, window: &[ImuSample], gyro_bias: &Vec3) -> Result<Vec3, MotionError> {
        if window.len() != self.window {
            return Err(MotionError::Shape(format!("expected a window of {} samples, got {}", self.window, window.len())));
        }
        let seq: Vec<[f64; INPUT_DIM]> = window
            .iter()
            .map(|s| {
                let mut x = [0.0; INPUT_DIM];
                self.input_norm.apply(&imu_channels(s, gyro_bias), &mut x);
                x
            })
            .collect();
        let y = lstm_forward(&self.params, &seq, None)?;
        let mut u = [0.0; OUTPUT_DIM];
        self.target_norm.invert(&y, &mut u);
        Ok(Vec3::new(u[0], u[1], u[2]))
    }

    pub fn save(&self, path: &Path) -> Result<(), MotionError> {
        let text = serde_json::to_string(self).map_err(|e| MotionError::File { path: path.display().to_string(), message: e.to_string() })?;
        crate::io::write_atomic(path, text.as_bytes())
            .map_err(|e| MotionError::File { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, MotionError> {
        let err = |m: String| MotionError::File { path: path.display().to_string(), message: m };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

/// Displacement scaled by forward speed and rotated into the world.
pub fn lstm_displacement(unit: &Vec3, orientation: &Quaternion, velocity: &Vec3, dt: f64) -> Vec3 {
    let heading = orientation.rotate(&Vec3::x());
    let speed = velocity.dot(&heading);
    orientation.rotate(unit) * (speed * dt)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MotionModel {
    ConstantVelocity,
    Lstm(Box<LstmModel>),
}

/// Per-frame quantities computed once, before sigma-point propagation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PreparedMotion {
    ConstantVelocity,
    Unit(Vec3),
}

impl MotionModel {
    /// Runs the network (if any) on the frame's IMU window.
    pub fn prepare(&self, imu_window: &[ImuSample], gyro_bias: &Vec3) -> Result<PreparedMotion, MotionError> {
        match self {
            MotionModel::ConstantVelocity => Ok(PreparedMotion::ConstantVelocity),
            MotionModel::Lstm(m) => Ok(PreparedMotion::Unit(m.unit_displacement(imu_window, gyro_bias)?)),
        }
    }

    pub fn window(&self) -> usize {
        match self {
            MotionModel::ConstantVelocity => 0,
            MotionModel::Lstm(m) => m.window,
        }
    }
}

impl PreparedMotion {
    pub fn displacement(&self, orientation: &Quaternion, velocity: &Vec3, dt: f64) -> Vec3 {
        match self {
            PreparedMotion::ConstantVelocity => velocity * dt,
            PreparedMotion::Unit(u) => lstm_displacement(u, orientation, velocity, dt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn input(v: Vec3, dt: f64) -> MotionModelInput<'static> {
        MotionModelInput { imu_window: &[], orientation: Quaternion::IDENTITY, velocity: v, gyro_bias: Vec3::zeros(), dt }
    }

    #[test]
    fn cv_examples() {
        assert_eq!(cv_predict(&input(Vec3::zeros(), 0.05)), Vec3::zeros());
        assert_abs_diff_eq!(cv_predict(&input(Vec3::new(0.5, 0.0, 0.0), 0.05)), Vec3::new(0.025, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(cv_predict(&input(Vec3::new(0.4, 0.3, 0.0), 0.1)), Vec3::new(0.04, 0.03, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn lstm_displacement_follows_heading() {
        let q = Quaternion::from_yaw(std::f64::consts::FRAC_PI_2);
        let d = lstm_displacement(&Vec3::new(1.0, 0.0, 0.0), &q, &Vec3::new(0.0, 0.5, 0.0), 0.1);
        assert_abs_diff_eq!(d, Vec3::new(0.0, 0.05, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn window_pads_and_truncates() {
        let imu: Vec<ImuSample> = (0..10)
            .map(|i| ImuSample { t: i as f64 * 0.1, angular_velocity: Vec3::repeat(i as f64), linear_acceleration: Vec3::zeros() })
            .collect();
        let w = imu_window(&imu, 0.5, 4);
        assert_eq!(w.iter().map(|s| s.angular_velocity.x).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0, 5.0]);
        let w = imu_window(&imu, 0.1, 4);
        assert_eq!(w.iter().map(|s| s.angular_velocity.x).collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0]);
        assert!(imu_window(&imu, -1.0, 4).is_empty());
    }

    #[test]
    fn model_file_round_trip_and_validation() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let model = LstmModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            hidden: 4,
            window: 3,
            input_norm: Normalization::identity(6),
            target_norm: Normalization { mean: vec![1.0, 0.0, 0.0], std: vec![0.01, 0.02, 1.0] },
            params: LstmParams::init(4, 0.25, &mut rng),
            train_loss: vec![1.0, 0.5],
            validation_loss: vec![1.1, 0.6],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(LstmModel::load(&path).unwrap(), model);
        let window = vec![ImuSample { t: 0.0, angular_velocity: Vec3::zeros(), linear_acceleration: Vec3::zeros() }; 3];
        assert!(model.unit_displacement(&window, &Vec3::zeros()).is_ok());
        assert!(matches!(model.unit_displacement(&window[..2], &Vec3::zeros()), Err(MotionError::Shape(_))));
        let mut bad = model.clone();
        bad.hidden = 5;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn cv_is_linear(vx in -2.0..2.0f64, vy in -2.0..2.0f64, dt in 0.001..1.0f64, k in 0.1..10.0f64) {
            let v = Vec3::new(vx, vy, 0.0);
            let a = cv_predict(&input(v, dt));
            prop_assert!((cv_predict(&input(v, k * dt)) - a * k).norm() <= 1e-12);
            prop_assert!((cv_predict(&input(v * k, dt)) - a * k).norm() <= 1e-12);
        }

        #[test]
        fn normalization_round_trips(xs in proptest::collection::vec(proptest::array::uniform6(-100.0..100.0f64), 2..50)) {
            let norm = Normalization::fit(xs.iter().map(|r| r.as_slice()), 6);
            for x in &xs {
                let mut y = [0.0; 6];
                let mut back = [0.0; 6];
                norm.apply(x, &mut y);
                norm.invert(&y, &mut back);
                for k in 0..6 {
                    prop_assert!((back[k] - x[k]).abs() <= 1e-9);
                }
            }
        }
    }
}
