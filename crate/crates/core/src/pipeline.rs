//! The odometry frame loop: IMU window → predict → associate → register
//! against the accumulated map → correct → grow the map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{collect_matches, compensate, similarity_matrix, MatchSet, PolicyParams};
use crate::exec::Exec;
use crate::fusion::{dead_reckon, integrate_gyro, ukf_correct, ukf_predict, FusionError, PoseMeasurement, UkfConfig, UkfState};
use crate::geometry::{Pose, Timestamped, Trajectory, Vec3};
use crate::io::{fmt_g9, numeric_csv, Dataset};
use crate::motion_model::{LstmModel, MotionModel};
use crate::radar_sim::{interpolate_pose, velocity_at, ImuSample, RadarScan};
use crate::registration::{icp_align, ndt_align_points, AlignmentResult, IcpOptions, Matcher, NdtMap, NdtOptions, PointMap, RegistrationError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionChoice {
    Rnn,
    ConstantVelocity,
}

/// The ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learned motion model with NDT registration.
    Full,
    /// Learned motion model with point-to-point ICP registration.
    Icp,
    /// Constant-velocity motion model with NDT registration.
    Cv,
    /// No radar: IMU dead reckoning.
    RadarRemoved,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Icp, Variant::Cv, Variant::RadarRemoved];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Icp => "icp",
            Variant::Cv => "cv",
            Variant::RadarRemoved => "radar_removed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// `base` with the matcher, motion model and radar switch of this variant.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {
                c.matcher = Matcher::Ndt;
                c.motion = MotionChoice::Rnn;
                c.use_radar = true;
            }
            Variant::Icp => {
                c.matcher = Matcher::Icp;
                c.motion = MotionChoice::Rnn;
                c.use_radar = true;
            }
            Variant::Cv => {
                c.matcher = Matcher::Ndt;
                c.motion = MotionChoice::ConstantVelocity;
                c.use_radar = true;
            }
            Variant::RadarRemoved => c.use_radar = false,
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialVelocity {
    Zero,
    /// Taken from the ground-truth trajectory at the first frame.
    GroundTruth,
    Value([f64; 3]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementNoise {
    /// m
    pub position: f64,
    /// rad
    pub rotation: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self { position: 0.005, rotation: 0.003 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub matcher: Matcher,
    pub motion: MotionChoice,
    /// With the radar disabled the run is pure IMU dead reckoning.
    pub use_radar: bool,
    pub association: PolicyParams,
    /// Rotate the previous scan by the integrated gyro before associating.
    pub gyro_compensation: bool,
    pub ndt: NdtOptions,
    pub icp: IcpOptions,
    pub ukf: UkfConfig,
    pub measurement: MeasurementNoise,
    pub initial_velocity: InitialVelocity,
    /// Keep inserting predicted-only frames until the map has this many
    /// valid NDT cells (or ICP points).
    pub bootstrap_map_size: usize,
    /// An unmatched point joins the map once the previous frame had an
    /// unmatched point within this distance of it (m, world frame).
    pub persistence_radius: f64,
    /// Keep the similarity matrix and matches of every frame.
    pub collect_debug: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            matcher: Matcher::Ndt,
            motion: MotionChoice::Rnn,
            use_radar: true,
            association: PolicyParams::default(),
            gyro_compensation: true,
            ndt: NdtOptions::default(),
            icp: IcpOptions::default(),
            ukf: UkfConfig::default(),
            measurement: MeasurementNoise::default(),
            initial_velocity: InitialVelocity::GroundTruth,
            bootstrap_map_size: 10,
            persistence_radius: 0.1,
            collect_debug: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("filter failure at t = {t}: {source}")]
    Filter { t: f64, source: FusionError },
}

/// One row of the state log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub t: f64,
    pub position: Vec3,
    pub orientation: crate::geometry::Quaternion,
    pub velocity: Vec3,
    pub gyro_bias: Vec3,
    pub covariance_trace: f64,
    /// Registration converged and the correction was applied.
    pub converged: bool,
    pub match_fraction: f64,
    pub matches: usize,
}

pub const STATE_LOG_HEADER: &str = "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,bx,by,bz,cov_trace,converged,match_fraction";

pub fn state_log_csv(frames: &[FrameRecord]) -> String {
    let rows: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            let q = f.orientation;
            vec![
                f.t,
                f.position.x,
                f.position.y,
                f.position.z,
                q.w,
                q.x,
                q.y,
                q.z,
                f.velocity.x,
                f.velocity.y,
                f.velocity.z,
                f.gyro_bias.x,
                f.gyro_bias.y,
                f.gyro_bias.z,
                f.covariance_trace,
                if f.converged { 1.0 } else { 0.0 },
                f.match_fraction,
            ]
        })
        .collect();
    numeric_csv(STATE_LOG_HEADER, &rows)
}

#[derive(Clone, Debug)]
pub enum RegisteredMap {
    Ndt(NdtMap),
    Points(PointMap),
    None,
}

impl RegisteredMap {
    fn new(matcher: Matcher, cfg: &PipelineConfig) -> Self {
        match matcher {
            Matcher::Ndt => RegisteredMap::Ndt(NdtMap::new(cfg.ndt.cell_size)),
            Matcher::Icp => RegisteredMap::Points(PointMap::new(cfg.icp.max_correspondence_distance.max(0.05))),
        }
    }

    fn size(&self) -> usize {
        match self {
            RegisteredMap::Ndt(m) => m.valid_cells(),
            RegisteredMap::Points(m) => m.len(),
            RegisteredMap::None => 0,
        }
    }

    fn insert(&mut self, points: &[Vec3]) {
        match self {
            RegisteredMap::Ndt(m) => m.insert(points),
            RegisteredMap::Points(m) => m.insert(points),
            RegisteredMap::None => {}
        }
    }

    fn align(&self, points: &[Vec3], initial: &Pose, cfg: &PipelineConfig) -> Result<AlignmentResult, RegistrationError> {
        match self {
            RegisteredMap::Ndt(m) => ndt_align_points(m, points, initial, &cfg.ndt, Exec::default()),
            RegisteredMap::Points(m) => icp_align(m, points, initial, &cfg.icp),
            RegisteredMap::None => Err(RegistrationError::ZeroOverlap),
        }
    }

    /// CSV dump: NDT cells, or ICP points as `x,y,z`.
    pub fn to_csv(&self) -> String {
        match self {
            RegisteredMap::Ndt(m) => m.to_csv(),
            RegisteredMap::Points(m) => {
                let rows: Vec<Vec<f64>> = m.points().iter().map(|p| vec![p.x, p.y, p.z]).collect();
                numeric_csv("x,y,z", &rows)
            }
            RegisteredMap::None => numeric_csv("x,y,z", &[]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Estimated pose at every radar frame.
    pub trajectory: Trajectory,
    pub frames: Vec<FrameRecord>,
    pub map: RegisteredMap,
    /// One line per frame that coasted on prediction, with the reason.
    pub diagnostics: Vec<String>,
    /// Filled when `collect_debug` is set.
    pub debug: Vec<FrameDebug>,
}

/// Association internals of one frame; `similarity[i][j]` scores current
/// point `i` against previous point `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDebug {
    pub t: f64,
    pub similarity: Vec<Vec<f64>>,
    pub matches: MatchSet,
}

impl RunOutput {
    pub fn corrected_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.converged).count()
    }
}

fn initial_velocity(data: &Dataset, cfg: &PipelineConfig, t0: f64) -> Vec3 {
    match cfg.initial_velocity {
        InitialVelocity::Zero => Vec3::zeros(),
        InitialVelocity::Value(v) => Vec3::from(v),
        InitialVelocity::GroundTruth if data.ground_truth.len() >= 2 => velocity_at(&data.ground_truth, t0, 1e-3),
        InitialVelocity::GroundTruth => Vec3::zeros(),
    }
}

fn initial_pose(data: &Dataset, t0: f64) -> Pose {
    if data.ground_truth.is_empty() {
        Pose::IDENTITY
    } else {
        interpolate_pose(&data.ground_truth, t0)
    }
}

/// IMU samples with `t0 < t ≤ t1`.
fn imu_between(imu: &[ImuSample], t0: f64, t1: f64) -> &[ImuSample] {
    let a = imu.partition_point(|s| s.t <= t0 + 1e-9);
    let b = imu.partition_point(|s| s.t <= t1 + 1e-9);
    &imu[a..b.max(a)]
}

fn scan_points(scan: &RadarScan, indices: impl Iterator<Item = usize>) -> Vec<Vec3> {
    indices.map(|i| scan.points[i].position).collect()
}

fn record(t: f64, s: &UkfState, converged: bool, match_fraction: f64, matches: usize) -> FrameRecord {
    FrameRecord {
        t,
        position: s.position,
        orientation: s.orientation,
        velocity: s.velocity,
        gyro_bias: s.gyro_bias,
        covariance_trace: s.covariance.trace(),
        converged,
        match_fraction,
        matches,
    }
}

pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig, model: Option<&LstmModel>) -> Result<RunOutput, PipelineError> {
    run_pipeline_observed(data, cfg, model, &mut |_| {})
}

/// As [`run_pipeline`]; `observe` sees the filter state after every predict
/// and every correct.
pub fn run_pipeline_observed(
    data: &Dataset,
    cfg: &PipelineConfig,
    model: Option<&LstmModel>,
    observe: &mut dyn FnMut(&UkfState),
) -> Result<RunOutput, PipelineError> {
    let Some(first) = data.scans.first() else {
        return Err(PipelineError::Data("dataset has no radar scans".into()));
    };
    cfg.association.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    cfg.ndt.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let t0 = first.t;
    let pose0 = initial_pose(data, t0);
    let v0 = initial_velocity(data, cfg, t0);
    if !cfg.use_radar {
        return dead_reckoning_run(data, &pose0, &v0);
    }
    let motion = match (cfg.motion, model) {
        (MotionChoice::ConstantVelocity, _) => MotionModel::ConstantVelocity,
        (MotionChoice::Rnn, Some(m)) => MotionModel::Lstm(Box::new(m.clone())),
        (MotionChoice::Rnn, None) => return Err(PipelineError::Config("the rnn motion model needs a trained model".into())),
    };

    let mut state = UkfState::new(&pose0, v0, &cfg.ukf.initial);
    let mut map = RegisteredMap::new(cfg.matcher, cfg);
    let mut frames = vec![record(t0, &state, false, 0.0, 0)];
    let mut trajectory = vec![Timestamped::new(t0, state.pose())];
    let mut diagnostics = Vec::new();
    let mut debug = Vec::new();
    let mut previous_pose = state.pose();
    let mut previous_unmatched: Vec<Vec3> = Vec::new();

    for k in 1..data.scans.len() {
        let (prev, scan) = (&data.scans[k - 1], &data.scans[k]);
        let dt = scan.t - prev.t;
        if !(dt > 0.0) {
            return Err(PipelineError::Data(format!("scan timestamps not increasing at t = {}", scan.t)));
        }
        let window = imu_between(&data.imu, prev.t, scan.t);
        let gyro_delta = integrate_gyro(window, &state.gyro_bias, dt);

        let predicted = match ukf_predict(&state, window, &motion, dt, &cfg.ukf) {
            Ok(s) => s,
            Err(FusionError::Motion(e)) => {
                diagnostics.push(format!("t={}: motion model failed ({e}); constant velocity used", fmt_g9(scan.t)));
                ukf_predict(&state, window, &MotionModel::ConstantVelocity, dt, &cfg.ukf)
                    .map_err(|source| PipelineError::Filter { t: scan.t, source })?
            }
            Err(source) => return Err(PipelineError::Filter { t: scan.t, source }),
        };
        observe(&predicted);
        state = predicted;

        let similarity = if cfg.gyro_compensation {
            similarity_matrix(scan, &compensate(prev, &gyro_delta), &cfg.association)
        } else {
            similarity_matrix(scan, prev, &cfg.association)
        };
        let matches = collect_matches(&similarity, &cfg.association);
        if cfg.collect_debug {
            debug.push(FrameDebug {
                t: scan.t,
                similarity: similarity.row_iter().map(|r| r.iter().copied().collect()).collect(),
                matches: matches.clone(),
            });
        }
        let current_points = scan_points(scan, matches.pairs.iter().map(|m| m.current));

        let mut converged = false;
        let mut match_fraction = 0.0;
        if matches.pairs.is_empty() {
            diagnostics.push(format!("t={}: no associated points", fmt_g9(scan.t)));
        } else if map.size() == 0 {
            diagnostics.push(format!("t={}: map is empty", fmt_g9(scan.t)));
        } else {
            match map.align(&current_points, &state.pose(), cfg) {
                Ok(r) if r.converged => {
                    match_fraction = r.match_fraction;
                    let z = PoseMeasurement::isotropic(r.pose, cfg.measurement.position, cfg.measurement.rotation);
                    match ukf_correct(&state, &z, &cfg.ukf) {
                        Ok(s) => {
                            observe(&s);
                            state = s;
                            converged = true;
                        }
                        Err(e) => diagnostics.push(format!("t={}: correction skipped ({e})", fmt_g9(scan.t))),
                    }
                }
                Ok(r) => {
                    match_fraction = r.match_fraction;
                    diagnostics.push(format!("t={}: registration did not converge", fmt_g9(scan.t)));
                }
                Err(e) => diagnostics.push(format!("t={}: registration failed ({e})", fmt_g9(scan.t))),
            }
        }

        let bootstrapping = map.size() < cfg.bootstrap_map_size;
        let pose = state.pose();
        let mut matched = vec![false; scan.points.len()];
        for m in &matches.pairs {
            matched[m.current] = true;
        }
        let unmatched: Vec<Vec3> =
            scan_points(scan, (0..scan.points.len()).filter(|&i| !matched[i])).iter().map(|p| pose.transform_point(p)).collect();
        if converged || bootstrapping {
            let mut world: Vec<Vec3> = current_points.iter().map(|p| pose.transform_point(p)).collect();
            if bootstrapping {
                // the previous frame's partners are reliable too and densify the first cells
                world.extend(scan_points(prev, matches.pairs.iter().map(|m| m.previous)).iter().map(|p| previous_pose.transform_point(p)));
            }
            let r2 = cfg.persistence_radius * cfg.persistence_radius;
            world.extend(unmatched.iter().filter(|p| previous_unmatched.iter().any(|o| (*p - o).norm_squared() <= r2)));
            map.insert(&world);
        }
        previous_unmatched = unmatched;
        previous_pose = state.pose();
        frames.push(record(scan.t, &state, converged, match_fraction, matches.pairs.len()));
        trajectory.push(Timestamped::new(scan.t, state.pose()));
    }
    Ok(RunOutput { trajectory, frames, map, diagnostics, debug })
}

/// Dead reckoning sampled at the radar frame times.
fn dead_reckoning_run(data: &Dataset, pose0: &Pose, v0: &Vec3) -> Result<RunOutput, PipelineError> {
    let t0 = data.scans[0].t;
    let imu: Vec<ImuSample> = data.imu.iter().filter(|s| s.t > t0).cloned().collect();
    let dense = dead_reckon(&imu, &Timestamped::new(t0, *pose0), v0).map_err(|e| PipelineError::Data(e.to_string()))?;
    let mut trajectory = Vec::with_capacity(data.scans.len());
    let mut frames = Vec::with_capacity(data.scans.len());
    for scan in &data.scans {
        let pose = interpolate_pose(&dense, scan.t);
        trajectory.push(Timestamped::new(scan.t, pose));
        frames.push(FrameRecord {
            t: scan.t,
            position: pose.position,
            orientation: pose.orientation,
            velocity: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            covariance_trace: 0.0,
            converged: false,
            match_fraction: 0.0,
            matches: 0,
        });
    }
    Ok(RunOutput { trajectory, frames, map: RegisteredMap::None, diagnostics: vec!["radar disabled: IMU dead reckoning".into()], debug: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ate, synchronize, DEFAULT_MAX_GAP};
    use crate::radar_sim::{simulate_dataset, Scenario, TrajectoryKind, TrajectoryParams};

    fn dataset(kind: TrajectoryKind, seed: u64, noiseless: bool) -> Dataset {
        let mut s = Scenario::new(kind, seed);
        if noiseless {
            s = s.noiseless();
        }
        simulate_dataset(&s, Exec::default()).unwrap()
    }

    fn cv() -> PipelineConfig {
        Variant::Cv.apply(&PipelineConfig::default())
    }

    fn final_error(data: &Dataset, out: &RunOutput) -> f64 {
        let last = out.trajectory.last().unwrap();
        (last.value.position - interpolate_pose(&data.ground_truth, last.t).position).norm()
    }

    #[test]
    fn noiseless_run_ends_close_to_truth() {
        let data = dataset(TrajectoryKind::Mixed, 1, true);
        let out = run_pipeline(&data, &cv(), None).unwrap();
        assert_eq!(out.trajectory.len(), data.scans.len());
        let err = final_error(&data, &out);
        assert!(err < 0.01, "final error {err} m");
    }

    #[test]
    fn ghosts_do_not_stop_the_run() {
        let data = dataset(TrajectoryKind::InfinityLoop, 2, false);
        let out = run_pipeline(&data, &cv(), None).unwrap();
        assert_eq!(out.frames.len(), data.scans.len());
        assert!(out.corrected_frames() > data.scans.len() / 2);
        let log = state_log_csv(&out.frames);
        assert_eq!(log.lines().count(), data.scans.len() + 1);
        assert_eq!(log.lines().next(), Some(STATE_LOG_HEADER));
    }

    #[test]
    fn radar_removed_diverges() {
        let data = dataset(TrajectoryKind::SharpTurns, 3, false);
        let out = run_pipeline(&data, &Variant::RadarRemoved.apply(&PipelineConfig::default()), None).unwrap();
        let pairs = synchronize(&out.trajectory, &data.ground_truth, DEFAULT_MAX_GAP).unwrap();
        let worst = ate(&pairs.pairs).unwrap().translational_cm.iter().cloned().fold(0.0, f64::max);
        assert!(worst > 100.0, "worst error {worst} cm");
    }

    #[test]
    fn runs_are_deterministic() {
        let data = dataset(TrajectoryKind::Line, 4, false);
        let a = run_pipeline(&data, &cv(), None).unwrap();
        let b = run_pipeline(&data, &cv(), None).unwrap();
        assert_eq!(crate::io::trajectory_to_csv(&a.trajectory), crate::io::trajectory_to_csv(&b.trajectory));
        assert_eq!(state_log_csv(&a.frames), state_log_csv(&b.frames));
    }

    #[test]
    fn rnn_without_model_is_a_config_error() {
        let data = Dataset { scans: vec![RadarScan::default()], ..Default::default() };
        assert!(matches!(run_pipeline(&data, &PipelineConfig::default(), None), Err(PipelineError::Config(_))));
        assert!(matches!(run_pipeline(&Dataset::default(), &cv(), None), Err(PipelineError::Data(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("nope"), None);
        let _ = TrajectoryParams::default();
    }
}
