//! Declarative run configuration (TOML) and the manifest written next to
//! every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::{write_atomic, GROUND_TRUTH_FILE, IMU_FILE, SCANS_FILE};
use crate::motion_model::train::{SyntheticSpec, TrainHyper};
use crate::pipeline::PipelineConfig;
use crate::radar_sim::Scenario;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Synthetic trajectories used when no dataset directories are listed.
    pub synthetic: SyntheticSpec,
    /// Recorded datasets to train on instead of synthetic data.
    pub datasets: Vec<PathBuf>,
    pub hyper: TrainHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Overrides `scenario.seed`.
    pub seed: u64,
    /// Directory holding a recorded dataset. Exclusive with `scenario`.
    pub dataset: Option<PathBuf>,
    pub scenario: Option<Scenario>,
    /// Trained motion model; trained from `training` when absent.
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            scenario: Some(Scenario::default()),
            model: None,
            output: None,
            pipeline: PipelineConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML. A file without `dataset` or `[scenario]` gets the
    /// default scenario.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let has_dataset = table.contains_key("dataset");
        let has_scenario = table.contains_key("scenario");
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if has_dataset && !has_scenario {
            cfg.scenario = None;
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.dataset.iter_mut().for_each(fix);
        self.model.iter_mut().for_each(fix);
        self.output.iter_mut().for_each(fix);
        self.training.datasets.iter_mut().for_each(fix);
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(s) = &mut self.scenario {
            s.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.dataset, &self.scenario) {
            (Some(_), Some(_)) => return Err(ConfigError::Invalid("set exactly one of `dataset` and `scenario`, not both".into())),
            (None, None) => return Err(ConfigError::Invalid("set one of `dataset` and `scenario`".into())),
            (Some(dir), None) => check_dataset_dir(dir)?,
            (None, Some(s)) => s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?,
        }
        for dir in &self.training.datasets {
            check_dataset_dir(dir)?;
        }
        if let Some(m) = &self.model {
            if !m.is_file() {
                return Err(ConfigError::Invalid(format!("model file {} does not exist", m.display())));
            }
        }
        if self.training.synthetic.window != self.training.hyper.window {
            return Err(ConfigError::Invalid(format!(
                "training.synthetic.window ({}) and training.hyper.window ({}) differ",
                self.training.synthetic.window, self.training.hyper.window
            )));
        }
        self.pipeline.association.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.pipeline.ndt.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// The full configuration with every default filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

fn check_dataset_dir(dir: &Path) -> Result<(), ConfigError> {
    for name in [SCANS_FILE, IMU_FILE, GROUND_TRUTH_FILE] {
        if !dir.join(name).is_file() {
            return Err(ConfigError::Invalid(format!("dataset {} has no {name}", dir.display())));
        }
    }
    Ok(())
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub scenario: Option<u64>,
    pub training_data: u64,
    pub training_init: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seeds: Seeds,
    /// TOML with every default echoed.
    pub config: String,
    pub outputs: Vec<OutputFile>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: Seeds {
                scenario: cfg.scenario.as_ref().map(|s| s.seed),
                training_data: cfg.training.synthetic.seed,
                training_init: cfg.training.hyper.seed,
            },
            config: cfg.to_toml(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    /// Hashes `files` (relative to `dir`), records them and writes the
    /// manifest atomically into `dir`.
    pub fn finish(mut self, dir: &Path, files: &[String], wall_clock_seconds: f64) -> std::io::Result<Self> {
        let mut files = files.to_vec();
        files.sort();
        files.dedup();
        self.outputs = files
            .into_iter()
            .map(|rel| {
                let bytes = std::fs::read(dir.join(&rel))?;
                let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
                Ok(OutputFile { path: rel, bytes: bytes.len() as u64, sha256 })
            })
            .collect::<std::io::Result<_>>()?;
        self.wall_clock_seconds = wall_clock_seconds;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes()).map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(self)
    }
}
