use serde::{Deserialize, Serialize};

use super::{
    frame_seed, generate_trajectory, interpolate_pose, simulate_imu, simulate_scan, velocity_at, Environment, ImuErrorModel, NoiseModel,
    OfficeLayout, RadarConfig, SimError, TrajectoryKind, TrajectoryParams,
};
use crate::exec::Exec;
use crate::io::Dataset;

/// Everything needed to synthesize one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub kind: TrajectoryKind,
    /// `rate` is ignored; poses are generated at `imu_rate`.
    pub trajectory: TrajectoryParams,
    pub imu_rate: f64,
    /// Rate of the stored ground-truth poses (Hz).
    pub ground_truth_rate: f64,
    pub radar: RadarConfig,
    pub ghost_rate: f64,
    pub dropout_rate: f64,
    pub noise: NoiseModel,
    pub ghost_intensity_ceiling: f64,
    pub wall_spacing: f64,
    pub clutter_density: f64,
    pub clearance: f64,
    pub imu_errors: ImuErrorModel,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        let env = Environment::default();
        let layout = OfficeLayout::around(&[]);
        Self {
            kind: TrajectoryKind::Mixed,
            trajectory: TrajectoryParams::default(),
            imu_rate: 400.0,
            ground_truth_rate: 100.0,
            radar: RadarConfig::default(),
            ghost_rate: env.ghost_rate,
            dropout_rate: env.dropout_rate,
            noise: env.noise,
            ghost_intensity_ceiling: env.ghost_intensity_ceiling,
            wall_spacing: layout.wall_spacing,
            clutter_density: layout.clutter_density,
            clearance: layout.clearance,
            imu_errors: ImuErrorModel::default(),
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn new(kind: TrajectoryKind, seed: u64) -> Self {
        Self { kind, seed, ..Default::default() }
    }

    /// No sensor noise, ghosts, dropouts or IMU errors.
    pub fn noiseless(mut self) -> Self {
        self.ghost_rate = 0.0;
        self.dropout_rate = 0.0;
        self.noise = NoiseModel::zero();
        self.imu_errors = ImuErrorModel::zero();
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.radar.validate()?;
        self.trajectory.validate()?;
        let rates_ok = self.imu_rate > 0.0 && self.ground_truth_rate > 0.0 && self.ground_truth_rate <= self.imu_rate;
        let probs_ok = (0.0..=1.0).contains(&self.ghost_rate) && (0.0..=1.0).contains(&self.dropout_rate);
        let layout_ok = self.wall_spacing > 0.0 && self.clutter_density >= 0.0 && self.clearance >= 0.0;
        let noise_ok = [self.noise.range_sigma, self.noise.azimuth_sigma, self.noise.intensity_sigma].iter().all(|s| *s >= 0.0);
        if !(rates_ok && probs_ok && layout_ok && noise_ok) {
            return Err(SimError::Configuration(
                "scenario needs positive rates (ground truth no faster than IMU), probabilities in [0, 1] and non-negative noise".into(),
            ));
        }
        Ok(())
    }

    /// Stable sub-seeds so each stream can change without disturbing the others.
    fn stream_seed(&self, stream: u64) -> u64 {
        frame_seed(self.seed, (1 << 40) + stream)
    }
}

/// Ground truth, IMU stream and radar scans in a generated office,
/// deterministic in `scenario.seed`. Scans start at t = 0 and run at the
/// radar frame rate.
pub fn simulate_dataset(scenario: &Scenario, exec: Exec) -> Result<Dataset, SimError> {
    scenario.validate()?;
    let mut params = TrajectoryParams { rate: scenario.imu_rate, ..scenario.trajectory.clone() };
    if scenario.kind == TrajectoryKind::Random {
        params.seed = scenario.stream_seed(0);
    }
    let truth = generate_trajectory(scenario.kind, &params)?;
    let imu = simulate_imu(&truth, scenario.imu_rate, &scenario.imu_errors, scenario.stream_seed(1))?;

    let path: Vec<_> = truth.iter().map(|s| s.value.position).collect();
    let layout = OfficeLayout {
        wall_spacing: scenario.wall_spacing,
        clutter_density: scenario.clutter_density,
        clearance: scenario.clearance,
        ..OfficeLayout::around(&path)
    };
    let env = Environment {
        ghost_rate: scenario.ghost_rate,
        dropout_rate: scenario.dropout_rate,
        noise: scenario.noise,
        ghost_intensity_ceiling: scenario.ghost_intensity_ceiling,
        ..Environment::office(&layout, scenario.stream_seed(2))
    };

    let end = truth.last().map_or(0.0, |s| s.t);
    let frame_dt = 1.0 / scenario.radar.frame_rate;
    let frames = (end / frame_dt + 1e-9).floor() as usize + 1;
    let scans = exec.map_range(frames, |k| {
        let t = k as f64 * frame_dt;
        let pose = interpolate_pose(&truth, t);
        let velocity = velocity_at(&truth, t, 1e-3);
        simulate_scan(&env, &pose, &velocity, &scenario.radar, frame_seed(scenario.seed, k as u64), t)
    });

    let stride = (scenario.imu_rate / scenario.ground_truth_rate).round().max(1.0) as usize;
    let mut ground_truth: Vec<_> = truth.iter().step_by(stride).cloned().collect();
    if ground_truth.last().map(|s| s.t) != truth.last().map(|s| s.t) {
        ground_truth.push(truth.last().cloned().expect("trajectory is non-empty"));
    }
    Ok(Dataset { scans, imu, ground_truth })
}
