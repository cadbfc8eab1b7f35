use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use rio::config::{ConfigError, RunConfig, RunManifest};
use rio::eval::{ablation_table, ate, synchronize, AteReport, ErrorStats, EvalError};
use rio::exec::Exec;
use rio::geometry::Trajectory;
use rio::io::{read_trajectory, trajectory_to_csv, write_atomic, DataError, Dataset, GROUND_TRUTH_FILE, IMU_FILE, SCANS_FILE};
use rio::motion_model::train::{synthetic_training_set, train as train_model, TrainingSet};
use rio::motion_model::{LstmModel, MotionError};
use rio::pipeline::{run_pipeline, state_log_csv, MotionChoice, PipelineConfig, PipelineError, RunOutput, Variant};
use rio::plot::{render, PlotSpec, Series};
use rio::radar_sim::{simulate_dataset, RadarConfig, SimError};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const STATE_LOG_FILE: &str = "state_log.csv";
pub const MAP_FILE: &str = "map.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ERRORS_FILE: &str = "errors.csv";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Configuration(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<MotionError> for CliError {
    fn from(e: MotionError) -> Self {
        match e {
            MotionError::Training(m) => CliError::Runtime(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            PipelineError::Data(m) => CliError::Data(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    started: Instant,
}

pub fn setup(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Context, CliError> {
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    let out = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("rio-out"));
    Ok(Context { cfg, out, started: Instant::now() })
}

/// Collects written files for the manifest.
struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
        write_atomic(&path, contents.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn finish(self, command: &str, ctx: &Context) -> Result<(), CliError> {
        RunManifest::new(command, &ctx.cfg)
            .finish(self.dir, &self.files, ctx.started.elapsed().as_secs_f64())
            .map_err(|e| CliError::Runtime(format!("cannot write manifest: {e}")))?;
        info!("wrote {} files to {}", self.files.len() + 1, self.dir.display());
        Ok(())
    }
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match (&cfg.dataset, &cfg.scenario) {
        (Some(dir), _) => Ok(Dataset::load(dir)?),
        (None, Some(s)) => {
            info!("simulating {:?} scenario, seed {}", s.kind, s.seed);
            Ok(simulate_dataset(s, Exec::default())?)
        }
        (None, None) => Err(CliError::Config("no dataset or scenario".into())),
    }
}

fn frame_rate(cfg: &RunConfig) -> f64 {
    cfg.scenario.as_ref().map_or(RadarConfig::default().frame_rate, |s| s.radar.frame_rate)
}

fn trained_model(cfg: &RunConfig) -> Result<LstmModel, CliError> {
    let t = &cfg.training;
    let set = if t.datasets.is_empty() {
        info!("generating {} synthetic training trajectories", t.synthetic.trajectories);
        synthetic_training_set(&t.synthetic)?
    } else {
        let mut set = TrainingSet::new(t.hyper.window);
        for (id, dir) in t.datasets.iter().enumerate() {
            let d = Dataset::load(dir)?;
            set.add_sequence(id, &d.ground_truth, &d.imu, frame_rate(cfg));
        }
        set
    };
    info!("training on {} windows for {} epochs", set.len(), t.hyper.epochs);
    Ok(train_model(&set, &t.hyper, Exec::default())?)
}

fn model_for(cfg: &RunConfig, pipelines: &[PipelineConfig]) -> Result<Option<LstmModel>, CliError> {
    if !pipelines.iter().any(|p| p.use_radar && p.motion == MotionChoice::Rnn) {
        return Ok(None);
    }
    match &cfg.model {
        Some(path) => Ok(Some(LstmModel::load(path)?)),
        None => trained_model(cfg).map(Some),
    }
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let Some(scenario) = &ctx.cfg.scenario else {
        return Err(CliError::Config("simulate needs a [scenario], not a dataset".into()));
    };
    let data = simulate_dataset(scenario, Exec::default())?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", ctx.out.display())))?;
    data.save(&ctx.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    info!("{} scans, {} IMU samples, {} ground-truth poses", data.scans.len(), data.imu.len(), data.ground_truth.len());
    let mut outputs = Outputs::new(&ctx.out)?;
    outputs.files = [SCANS_FILE, IMU_FILE, GROUND_TRUTH_FILE].map(String::from).to_vec();
    outputs.finish("simulate", ctx)
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let model = trained_model(&ctx.cfg)?;
    if let (Some(t), Some(v)) = (model.train_loss.last(), model.validation_loss.last()) {
        info!("final training loss {t:.5}, validation loss {v:.5}");
    }
    let mut outputs = Outputs::new(&ctx.out)?;
    let text = serde_json::to_string(&model).map_err(|e| CliError::Runtime(e.to_string()))?;
    outputs.write(MODEL_FILE, &text)?;
    outputs.finish("train", ctx)
}

#[derive(Serialize)]
struct Report {
    frames: usize,
    dropped: usize,
    max_gap: f64,
    translation_cm: ErrorStats,
    rotation_deg: ErrorStats,
}

fn evaluate(estimate: &Trajectory, truth: &Trajectory, max_gap: f64) -> Result<(AteReport, Report), CliError> {
    let synced = synchronize(estimate, truth, max_gap)?;
    let r = ate(&synced.pairs)?;
    let summary = Report { frames: r.len(), dropped: synced.dropped, max_gap, translation_cm: r.translation, rotation_deg: r.rotation };
    Ok((r, summary))
}

fn write_evaluation(outputs: &mut Outputs, prefix: &str, r: &AteReport, summary: &Report) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    outputs.write(&format!("{prefix}{REPORT_FILE}"), &json)?;
    outputs.write(&format!("{prefix}{ERRORS_FILE}"), &r.errors_csv())
}

/// Writes trajectory, state log, map, diagnostics and, with ground truth,
/// the evaluation. Returns the report when one could be computed.
fn write_run(outputs: &mut Outputs, prefix: &str, data: &Dataset, run: &RunOutput, dump_debug: bool) -> Result<Option<AteReport>, CliError> {
    outputs.write(&format!("{prefix}{TRAJECTORY_FILE}"), &trajectory_to_csv(&run.trajectory))?;
    outputs.write(&format!("{prefix}{STATE_LOG_FILE}"), &state_log_csv(&run.frames))?;
    outputs.write(&format!("{prefix}{MAP_FILE}"), &run.map.to_csv())?;
    let mut diag = run.diagnostics.join("\n");
    diag.push('\n');
    outputs.write(&format!("{prefix}diagnostics.txt"), &diag)?;
    if dump_debug {
        let mut lines = String::new();
        for frame in &run.debug {
            lines.push_str(&serde_json::to_string(frame).map_err(|e| CliError::Runtime(e.to_string()))?);
            lines.push('\n');
        }
        outputs.write(&format!("{prefix}debug.jsonl"), &lines)?;
    }
    if data.ground_truth.is_empty() {
        return Ok(None);
    }
    outputs.write(&format!("{prefix}{GROUND_TRUTH_FILE}"), &trajectory_to_csv(&data.ground_truth))?;
    match evaluate(&run.trajectory, &data.ground_truth, rio::eval::DEFAULT_MAX_GAP) {
        Ok((r, summary)) => {
            write_evaluation(outputs, prefix, &r, &summary)?;
            Ok(Some(r))
        }
        Err(e) => {
            warn!("evaluation skipped: {e}");
            Ok(None)
        }
    }
}

pub fn run(ctx: &Context, variant: Variant, dump_debug: bool) -> Result<(), CliError> {
    let data = load_data(&ctx.cfg)?;
    let mut pipeline = variant.apply(&ctx.cfg.pipeline);
    pipeline.collect_debug = dump_debug;
    let model = model_for(&ctx.cfg, std::slice::from_ref(&pipeline))?;
    let t = Instant::now();
    let out = run_pipeline(&data, &pipeline, model.as_ref())?;
    info!(
        "{} frames in {:.2} s, {} corrected, {} coasted",
        out.frames.len(),
        t.elapsed().as_secs_f64(),
        out.corrected_frames(),
        out.frames.len() - out.corrected_frames()
    );
    let mut outputs = Outputs::new(&ctx.out)?;
    if let Some(r) = write_run(&mut outputs, "", &data, &out, dump_debug)? {
        info!("ATE: translation RMSE {:.2} cm, rotation RMSE {:.2} deg", r.translation.rmse, r.rotation.rmse);
    }
    outputs.finish(&format!("run --variant {}", variant.name()), ctx)
}

pub const ABLATION_VARIANTS: [Variant; 3] = [Variant::Full, Variant::Icp, Variant::Cv];

pub fn ablate(ctx: &Context) -> Result<(), CliError> {
    let data = load_data(&ctx.cfg)?;
    if data.ground_truth.is_empty() {
        return Err(CliError::Data("ablation needs ground truth".into()));
    }
    let pipelines: Vec<PipelineConfig> = ABLATION_VARIANTS.iter().map(|v| v.apply(&ctx.cfg.pipeline)).collect();
    let model = model_for(&ctx.cfg, &pipelines)?;
    let mut outputs = Outputs::new(&ctx.out)?;
    let mut reports = BTreeMap::new();
    let mut series = vec![Series::line("ground truth", xy(&data.ground_truth))];
    for (v, p) in ABLATION_VARIANTS.iter().zip(&pipelines) {
        let out = run_pipeline(&data, p, model.as_ref())?;
        let report = write_run(&mut outputs, &format!("{}/", v.name()), &data, &out, false)?
            .ok_or_else(|| CliError::Data(format!("{}: estimate does not overlap the ground truth", v.name())))?;
        info!("{:>5}: translation RMSE {:.2} cm, rotation RMSE {:.2} deg", v.name(), report.translation.rmse, report.rotation.rmse);
        series.push(Series::line(v.name(), xy(&out.trajectory)));
        reports.insert(v.name().to_string(), report);
    }
    let table = ablation_table(&reports)?;
    outputs.write("ablation.csv", &table.to_csv())?;
    outputs.write("ablation.txt", &table.to_text())?;
    println!("{}", table.to_text());
    outputs.write("trajectories.svg", &render(&trajectory_spec("Trajectories"), &series))?;
    outputs.finish("ablate", ctx)
}

fn xy(traj: &Trajectory) -> Vec<(f64, f64)> {
    traj.iter().map(|s| (s.value.position.x, s.value.position.y)).collect()
}

fn trajectory_spec(title: &str) -> PlotSpec {
    PlotSpec { title: title.into(), x_label: "x (m)".into(), y_label: "y (m)".into(), equal_aspect: true }
}

/// `(x, y)` of every row of a map dump (NDT cell means or ICP points).
fn map_points(text: &str) -> Vec<(f64, f64)> {
    let mut lines = text.lines();
    let Some(header) = lines.next() else { return Vec::new() };
    let cols: Vec<&str> = header.split(',').collect();
    let find = |names: [&str; 2]| cols.iter().position(|c| names.contains(c));
    let (Some(ix), Some(iy)) = (find(["mx", "x"]), find(["my", "y"])) else { return Vec::new() };
    lines
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((f.get(ix)?.parse().ok()?, f.get(iy)?.parse().ok()?))
        })
        .collect()
}

pub fn plot(run_dir: &Path, out: &Path) -> Result<(), CliError> {
    let estimate = read_trajectory(&run_dir.join(TRAJECTORY_FILE))?;
    let truth_path = run_dir.join(GROUND_TRUTH_FILE);
    let truth = if truth_path.is_file() { read_trajectory(&truth_path)? } else { Vec::new() };
    let mut outputs = Outputs::new(out)?;

    let mut series = Vec::new();
    if let Ok(text) = std::fs::read_to_string(run_dir.join(MAP_FILE)) {
        let pts = map_points(&text);
        if !pts.is_empty() {
            series.push(Series::points("registered map", pts));
        }
    }
    if !truth.is_empty() {
        series.push(Series::line("ground truth", xy(&truth)));
    }
    series.push(Series::line("estimate", xy(&estimate)));
    outputs.write("trajectory.svg", &render(&trajectory_spec("Trajectory"), &series))?;

    let errors = if estimate.is_empty() || truth.is_empty() {
        None
    } else {
        evaluate(&estimate, &truth, rio::eval::DEFAULT_MAX_GAP).ok().map(|(r, _)| r)
    };
    let curve = |values: Option<&[f64]>| match (&errors, values) {
        (Some(r), Some(v)) => {
            let t0 = r.times.first().copied().unwrap_or(0.0);
            vec![Series::line("estimate", r.times.iter().zip(v).map(|(t, e)| (t - t0, *e)).collect())]
        }
        _ => Vec::new(),
    };
    let spec = |title: &str, y: &str| PlotSpec { title: title.into(), x_label: "time (s)".into(), y_label: y.into(), equal_aspect: false };
    let translational = curve(errors.as_ref().map(|r| r.translational_cm.as_slice()));
    outputs.write("translation_error.svg", &render(&spec("Absolute translational error", "error (cm)"), &translational))?;
    let rotational = curve(errors.as_ref().map(|r| r.rotational_deg.as_slice()));
    outputs.write("rotation_error.svg", &render(&spec("Absolute rotational error", "error (deg)"), &rotational))?;
    info!("plots written to {}", out.display());
    Ok(())
}

pub fn eval(estimate: &Path, truth: &Path, out: Option<&Path>, max_gap: f64) -> Result<(), CliError> {
    if !(max_gap >= 0.0) {
        return Err(CliError::Config("max-gap must be non-negative".into()));
    }
    let est = read_trajectory(estimate)?;
    let gt = read_trajectory(truth)?;
    let (r, summary) = evaluate(&est, &gt, max_gap)?;
    println!(
        "frames {} (dropped {})\ntranslation cm: mean {:.3} median {:.3} std {:.3} rmse {:.3}\nrotation deg:   mean {:.3} median {:.3} std {:.3} rmse {:.3}",
        summary.frames,
        summary.dropped,
        r.translation.mean,
        r.translation.median,
        r.translation.std,
        r.translation.rmse,
        r.rotation.mean,
        r.rotation.median,
        r.rotation.std,
        r.rotation.rmse
    );
    if let Some(dir) = out {
        let mut outputs = Outputs::new(dir)?;
        write_evaluation(&mut outputs, "", &r, &summary)?;
    }
    Ok(())
}
