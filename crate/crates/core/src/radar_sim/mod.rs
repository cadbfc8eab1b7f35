//! Synthetic FMCW radar and IMU streams along ground-truth trajectories.
//!
//! Ranges pass through the beat-frequency domain (quantized to FFT bins of
//! one range resolution) and bearings through the inter-antenna phase
//! difference, so the simulator exercises the same conversions a real
//! point-cloud front end performs.

mod environment;
mod imu;
mod scenario;
mod trajectory;

pub use environment::{Environment, Landmark, NoiseModel, OfficeLayout};
pub use imu::{simulate_imu, ImuErrorModel, ImuSample};
pub use scenario::{simulate_dataset, Scenario};
pub use trajectory::{
    generate_trajectory, interpolate_pose, path_length, path_length_of, velocity_at, TrajectoryKind, TrajectoryParams,
};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("range {range:.3} m exceeds the maximum unambiguous range")]
    OutOfRange { range: f64 },
    #[error("phase difference aliases: asin argument {argument:.4} outside [-1, 1]")]
    Aliasing { argument: f64 },
    #[error("trajectory needs at least two poses, got {0}")]
    InsufficientTrajectory(usize),
    #[error("trajectory timestamps must be strictly increasing (index {0})")]
    NonMonotonicTimestamps(usize),
    #[error("invalid configuration: {0}")]
    Configuration(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    /// Chirp start frequency (Hz).
    pub start_frequency: f64,
    /// Swept bandwidth (Hz).
    pub bandwidth: f64,
    /// Chirp duration (s).
    pub chirp_duration: f64,
    /// Frequency slope (Hz/s).
    pub slope: f64,
    /// Receive antenna spacing (m).
    pub antenna_spacing: f64,
    /// Carrier wavelength (m).
    pub wavelength: f64,
    pub range_resolution: f64,
    pub max_range: f64,
    pub max_radial_velocity: f64,
    /// Full azimuth field of view (rad), symmetric about boresight (+x).
    pub fov_azimuth: f64,
    pub max_points_per_frame: usize,
    pub frame_rate: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        let start_frequency = 76e9;
        let bandwidth = 4e9;
        let slope = 70e6 / 1e-6;
        let wavelength = SPEED_OF_LIGHT / start_frequency;
        Self {
            start_frequency,
            bandwidth,
            chirp_duration: bandwidth / slope,
            slope,
            antenna_spacing: wavelength / 2.0,
            wavelength,
            range_resolution: 0.043,
            max_range: 22.55,
            max_radial_velocity: 2.28,
            fov_azimuth: 120f64.to_radians(),
            max_points_per_frame: 63,
            frame_rate: 20.0,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Configuration(m.to_string()));
        if !(self.bandwidth > 0.0 && self.chirp_duration > 0.0 && self.slope > 0.0) {
            return bad("bandwidth, chirp duration and slope must be positive");
        }
        if ((self.slope * self.chirp_duration - self.bandwidth) / self.bandwidth).abs() > 1e-6 {
            return bad("slope × chirp_duration must equal bandwidth");
        }
        if !(self.range_resolution > 0.0) {
            return bad("range_resolution must be positive");
        }
        if self.max_points_per_frame < 1 {
            return bad("max_points_per_frame must be at least 1");
        }
        if !(self.max_range > 0.0 && self.frame_rate > 0.0 && self.wavelength > 0.0 && self.antenna_spacing > 0.0) {
            return bad("max_range, frame_rate, wavelength and antenna_spacing must be positive");
        }
        if !(self.fov_azimuth > 0.0 && self.fov_azimuth <= 2.0 * PI) {
            return bad("fov_azimuth must lie in (0, 2π]");
        }
        Ok(())
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.frame_rate
    }

    /// Beat frequency of a reflector at range `d`.
    pub fn if_frequency(&self, d: f64) -> f64 {
        2.0 * self.slope * d / SPEED_OF_LIGHT
    }

    /// Inter-antenna phase difference for a bearing `theta`.
    pub fn phase_difference(&self, theta: f64) -> f64 {
        2.0 * PI * self.antenna_spacing * theta.sin() / self.wavelength
    }
}

/// Range from the IF beat frequency: `d = f_IF · c / (2S)`.
pub fn range_from_if(f_if: f64, cfg: &RadarConfig) -> Result<f64, SimError> {
    if !(f_if >= 0.0) {
        return Err(SimError::Configuration(format!("IF frequency must be non-negative, got {f_if}")));
    }
    let d = f_if * SPEED_OF_LIGHT / (2.0 * cfg.slope);
    if d > cfg.max_range {
        return Err(SimError::OutOfRange { range: d });
    }
    Ok(d)
}

/// Angle of arrival from the phase difference between an antenna pair:
/// `θ = asin(λω / (2π d))`.
pub fn aoa_from_phase(omega: f64, cfg: &RadarConfig) -> Result<f64, SimError> {
    let argument = cfg.wavelength * omega / (2.0 * PI * cfg.antenna_spacing);
    if !(argument.abs() <= 1.0) {
        return Err(SimError::Aliasing { argument });
    }
    Ok(argument.asin())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    /// Sensor-frame position (m).
    pub position: Vec3,
    /// Received power (linear units).
    pub intensity: f64,
    /// Range rate (m/s); negative while closing.
    pub radial_velocity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RadarScan {
    pub t: f64,
    pub points: Vec<RadarPoint>,
}

/// Ground-truth origin of a simulated detection. Kept out of [`RadarPoint`]
/// so datasets carry only what a real sensor reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointLabel {
    Landmark(usize),
    Ghost { parent: usize },
}

impl PointLabel {
    pub fn is_ghost(&self) -> bool {
        matches!(self, PointLabel::Ghost { .. })
    }
}

/// Multipath ghosts appear this far beyond their parent reflector (m).
const GHOST_EXTENSION: (f64, f64) = (0.5, 3.0);
/// Returns closer than this are treated as this close in the power law.
const MIN_POWER_RANGE: f64 = 0.1;

/// Per-frame seed derived from a base seed and a frame index (SplitMix64).
pub fn frame_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn simulate_scan(
    env: &Environment,
    sensor_pose: &Pose,
    sensor_velocity: &Vec3,
    cfg: &RadarConfig,
    rng_seed: u64,
    t: f64,
) -> RadarScan {
    simulate_scan_labeled(env, sensor_pose, sensor_velocity, cfg, rng_seed, t).0
}

/// Scan plus the ground-truth label of every returned point.
pub fn simulate_scan_labeled(
    env: &Environment,
    sensor_pose: &Pose,
    sensor_velocity: &Vec3,
    cfg: &RadarConfig,
    rng_seed: u64,
    t: f64,
) -> (RadarScan, Vec<PointLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let world_to_sensor = sensor_pose.inverse();
    let half_fov = 0.5 * cfg.fov_azimuth;
    let noise = &env.noise;
    // bin width of the range FFT expressed as a beat frequency
    let if_bin = cfg.if_frequency(cfg.range_resolution);
    let phase_sigma = noise.azimuth_sigma * 2.0 * PI * cfg.antenna_spacing / cfg.wavelength;

    let mut detections: Vec<(RadarPoint, PointLabel)> = Vec::new();
    for (id, landmark) in env.landmarks.iter().enumerate() {
        let local = world_to_sensor.transform_point(&landmark.position);
        let true_range = local.norm();
        if true_range > cfg.max_range || true_range < 1e-9 {
            continue;
        }
        let azimuth = local.y.atan2(local.x);
        if azimuth.abs() > half_fov {
            continue;
        }
        let horizontal = (local.x * local.x + local.y * local.y).sqrt();
        let elevation = local.z.atan2(horizontal);

        let draws: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let dropped = rng.gen::<f64>() < env.dropout_rate;
        let ghost_draw: f64 = rng.gen();
        let ghost_extension = rng.gen_range(GHOST_EXTENSION.0..GHOST_EXTENSION.1);
        let ghost_fraction: f64 = rng.gen();
        if dropped {
            continue;
        }

        // range: beat frequency snapped to its FFT bin, then jitter
        let f_if = (cfg.if_frequency(true_range) / if_bin).round() * if_bin;
        let Ok(quantized) = range_from_if(f_if, cfg) else { continue };
        let range = (quantized + noise.range_sigma * draws[0]).max(0.0);
        if range > cfg.max_range {
            continue;
        }
        // bearing: phase difference with jitter, inverted through the AoA relation
        let omega = cfg.phase_difference(azimuth) + phase_sigma * draws[1];
        let Ok(measured_azimuth) = aoa_from_phase(omega, cfg) else { continue };
        let measured_elevation = elevation + noise.azimuth_sigma * draws[2];

        let direction = Vec3::new(
            measured_elevation.cos() * measured_azimuth.cos(),
            measured_elevation.cos() * measured_azimuth.sin(),
            measured_elevation.sin(),
        );
        let line_of_sight = (landmark.position - sensor_pose.position) / true_range;
        let radial_velocity = (-sensor_velocity.dot(&line_of_sight))
            .clamp(-cfg.max_radial_velocity, cfg.max_radial_velocity);
        let intensity = landmark.reflectivity / true_range.max(MIN_POWER_RANGE).powi(4)
            * (noise.intensity_sigma * draws[3]).exp();

        detections.push((
            RadarPoint { position: direction * range, intensity, radial_velocity },
            PointLabel::Landmark(id),
        ));

        if ghost_draw < env.ghost_rate {
            let ghost_range = range + ghost_extension;
            if ghost_range <= cfg.max_range {
                detections.push((
                    RadarPoint {
                        position: direction * ghost_range,
                        intensity: ghost_fraction * env.ghost_intensity_ceiling,
                        radial_velocity,
                    },
                    PointLabel::Ghost { parent: id },
                ));
            }
        }
    }

    // strongest returns survive the per-frame point budget
    detections.sort_by(|a, b| b.0.intensity.total_cmp(&a.0.intensity));
    detections.truncate(cfg.max_points_per_frame);
    let (points, labels) = detections.into_iter().unzip();
    (RadarScan { t, points }, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn default_config_is_consistent() {
        let cfg = RadarConfig::default();
        cfg.validate().unwrap();
        assert_abs_diff_eq!(cfg.slope * cfg.chirp_duration, cfg.bandwidth, epsilon = 1e-3);
        assert_eq!(cfg.max_points_per_frame, 63);
        assert_eq!(cfg.frame_rate, 20.0);
        assert_abs_diff_eq!(cfg.fov_azimuth.to_degrees(), 120.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = RadarConfig::default();
        cfg.chirp_duration *= 1.01;
        assert!(cfg.validate().is_err());
        let cfg = RadarConfig { range_resolution: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = RadarConfig { max_points_per_frame: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn range_examples() {
        let cfg = RadarConfig::default();
        assert_eq!(range_from_if(0.0, &cfg).unwrap(), 0.0);
        // 1e6 · 299792458 / (2 · 70e12)
        assert_abs_diff_eq!(range_from_if(1e6, &cfg).unwrap(), 2.141_374_7, epsilon = 1e-6);
        let cutoff = cfg.if_frequency(22.55);
        assert_abs_diff_eq!(range_from_if(cutoff, &cfg).unwrap(), 22.55, epsilon = 1e-9);
        assert!(matches!(range_from_if(cutoff * 1.001, &cfg), Err(SimError::OutOfRange { .. })));
        assert!(range_from_if(-1.0, &cfg).is_err());
    }

    #[test]
    fn aoa_examples() {
        let cfg = RadarConfig::default();
        assert_eq!(aoa_from_phase(0.0, &cfg).unwrap(), 0.0);
        assert_abs_diff_eq!(aoa_from_phase(PI / 2.0, &cfg).unwrap(), std::f64::consts::FRAC_PI_6, epsilon = 1e-10);
        assert!(matches!(aoa_from_phase(2.0 * PI, &cfg), Err(SimError::Aliasing { argument }) if (argument - 2.0).abs() < 1e-12));
    }

    fn quiet_env(landmarks: Vec<Landmark>) -> Environment {
        Environment { landmarks, noise: NoiseModel::zero(), ghost_rate: 0.0, dropout_rate: 0.0, ..Default::default() }
    }

    #[test]
    fn empty_environment_gives_empty_scan() {
        let scan = simulate_scan(&quiet_env(vec![]), &Pose::IDENTITY, &Vec3::zeros(), &RadarConfig::default(), 1, 0.0);
        assert!(scan.points.is_empty());
    }

    #[test]
    fn single_landmark_ahead() {
        let cfg = RadarConfig::default();
        let env = quiet_env(vec![Landmark::new(Vec3::new(2.0, 0.0, 0.0), 1e7)]);
        let scan = simulate_scan(&env, &Pose::IDENTITY, &Vec3::zeros(), &cfg, 3, 0.0);
        assert_eq!(scan.points.len(), 1);
        let p = scan.points[0].position;
        assert!((p.x - 2.0).abs() <= cfg.range_resolution / 2.0);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn point_budget_keeps_strongest() {
        let cfg = RadarConfig::default();
        let landmarks = (0..100)
            .map(|i| {
                let a = (i as f64 / 99.0 - 0.5) * 1.8;
                Landmark::new(Vec3::new(4.0 * a.cos(), 4.0 * a.sin(), 0.0), 1e6 * (1.0 + i as f64))
            })
            .collect();
        let scan = simulate_scan(&quiet_env(landmarks), &Pose::IDENTITY, &Vec3::zeros(), &cfg, 9, 0.0);
        assert_eq!(scan.points.len(), 63);
        let min_kept = scan.points.iter().map(|p| p.intensity).fold(f64::INFINITY, f64::min);
        // the weakest 37 reflectors (all at the same range) are the ones dropped
        assert!(min_kept >= 1e6 * 38.0 / 4f64.powi(4) * (1.0 - 1e-12));
    }

    #[test]
    fn out_of_fov_and_range_are_invisible() {
        let cfg = RadarConfig::default();
        let env = quiet_env(vec![
            Landmark::new(Vec3::new(-2.0, 0.0, 0.0), 1e7),
            Landmark::new(Vec3::new(1.0, 2.0, 0.0), 1e7),
            Landmark::new(Vec3::new(30.0, 0.0, 0.0), 1e9),
        ]);
        assert!(simulate_scan(&env, &Pose::IDENTITY, &Vec3::zeros(), &cfg, 0, 0.0).points.is_empty());
    }

    #[test]
    fn closing_landmark_has_negative_radial_velocity() {
        let cfg = RadarConfig::default();
        let env = quiet_env(vec![Landmark::new(Vec3::new(5.0, 0.0, 0.0), 1e7)]);
        let scan = simulate_scan(&env, &Pose::IDENTITY, &Vec3::new(0.45, 0.0, 0.0), &cfg, 0, 0.0);
        assert_abs_diff_eq!(scan.points[0].radial_velocity, -0.45, epsilon = 1e-6);
        let fast = simulate_scan(&env, &Pose::IDENTITY, &Vec3::new(9.0, 0.0, 0.0), &cfg, 0, 0.0);
        assert_eq!(fast.points[0].radial_velocity, -cfg.max_radial_velocity);
    }

    #[test]
    fn ghosts_are_weak_and_beyond_parent() {
        let cfg = RadarConfig::default();
        let mut env = quiet_env(
            (0..20).map(|i| Landmark::new(Vec3::new(3.0, -2.0 + 0.2 * i as f64, 0.1), 5e6)).collect(),
        );
        env.ghost_rate = 1.0;
        let (scan, labels) = simulate_scan_labeled(&env, &Pose::IDENTITY, &Vec3::zeros(), &cfg, 5, 0.0);
        let ghosts: Vec<_> = labels.iter().zip(&scan.points).filter(|(l, _)| l.is_ghost()).collect();
        assert_eq!(ghosts.len(), 20);
        for (label, ghost) in ghosts {
            let PointLabel::Ghost { parent } = label else { unreachable!() };
            let parent_range = env.landmarks[*parent].position.norm();
            assert!(ghost.position.norm() > parent_range + 0.4);
            assert!(ghost.intensity < env.ghost_intensity_ceiling);
        }
    }

    proptest! {
        #[test]
        fn range_is_linear_in_if(f in 0.0..1.05e7f64, k in 0.0..1.0f64) {
            let cfg = RadarConfig::default();
            let a = range_from_if(f * k, &cfg).unwrap();
            let b = range_from_if(f, &cfg).unwrap();
            prop_assert!((a - k * b).abs() <= 1e-9 * b.max(1e-300));
        }

        #[test]
        fn noiseless_scan_is_quantized_projection(
            x in 0.5..15.0f64, y in -5.0..5.0f64, z in -0.5..0.5f64, yaw in -0.5..0.5f64, seed in 0u64..1000
        ) {
            let cfg = RadarConfig::default();
            let pose = Pose::new(Vec3::new(0.3, -0.2, 0.0), Quaternion::from_yaw(yaw));
            let world = pose.transform_point(&Vec3::new(x, y, z));
            let env = quiet_env(vec![Landmark::new(world, 1e7)]);
            let scan = simulate_scan(&env, &pose, &Vec3::zeros(), &cfg, seed, 0.0);
            let local = Vec3::new(x, y, z);
            if local.y.atan2(local.x).abs() <= cfg.fov_azimuth / 2.0 && local.norm() <= cfg.max_range {
                prop_assert_eq!(scan.points.len(), 1);
                let p = scan.points[0].position;
                let expected = local.normalize() * (local.norm() / cfg.range_resolution).round() * cfg.range_resolution;
                prop_assert!((p - expected).norm() <= 1e-9);
            }
        }

        #[test]
        fn identical_seeds_reproduce(seed in 0u64..u64::MAX) {
            let env = Environment::office(&OfficeLayout::around(&[Vec3::zeros(), Vec3::new(6.0, 2.0, 0.0)]), seed);
            let pose = Pose::planar(1.0, 0.5, 0.3);
            let a = simulate_scan(&env, &pose, &Vec3::new(0.5, 0.0, 0.0), &RadarConfig::default(), seed, 0.0);
            let b = simulate_scan(&env, &pose, &Vec3::new(0.5, 0.0, 0.0), &RadarConfig::default(), seed, 0.0);
            prop_assert_eq!(a, b);
        }
    }
}
