//! Absolute trajectory error and ablation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle_between, Pose, Timestamped};
use crate::io::{fmt_g9, numeric_csv};
use crate::registration::rigid_transform_svd;

/// Worst-case estimate-to-reference time difference accepted by default (s).
pub const DEFAULT_MAX_GAP: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no estimate has a reference pose within {max_gap} s")]
    NoOverlap { max_gap: f64 },
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("an ablation table needs at least two variants, got {0}")]
    TooFewVariants(usize),
    #[error("cannot align: {0}")]
    Alignment(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncedPair {
    pub t: f64,
    pub estimate: Pose,
    pub truth: Pose,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synchronized {
    pub pairs: Vec<SyncedPair>,
    /// Estimates with no reference pose within the allowed gap.
    pub dropped: usize,
}

/// Pairs every estimate with the nearest-in-time reference pose (earlier one
/// on ties). Both inputs must be sorted by time.
pub fn synchronize(est: &[Timestamped<Pose>], gt: &[Timestamped<Pose>], max_gap: f64) -> Result<Synchronized, EvalError> {
    let mut pairs = Vec::with_capacity(est.len());
    let mut dropped = 0;
    let mut j = 0;
    for e in est {
        if gt.is_empty() {
            dropped += 1;
            continue;
        }
        while j + 1 < gt.len() && (gt[j + 1].t - e.t).abs() < (gt[j].t - e.t).abs() {
            j += 1;
        }
        let gap = (gt[j].t - e.t).abs();
        if gap <= max_gap + 1e-12 {
            pairs.push(SyncedPair { t: e.t, estimate: e.value, truth: gt[j].value, gap });
        } else {
            dropped += 1;
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap { max_gap });
    }
    Ok(Synchronized { pairs, dropped })
}

/// Rigidly moves every estimate by the transform that best aligns estimated
/// positions to reference positions in the least-squares sense.
pub fn align(pairs: &[SyncedPair]) -> Result<Vec<SyncedPair>, EvalError> {
    let src: Vec<_> = pairs.iter().map(|p| p.estimate.position).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.truth.position).collect();
    let t = rigid_transform_svd(&src, &dst).ok_or(EvalError::Alignment("need at least three pairs"))?;
    Ok(pairs.iter().map(|p| SyncedPair { estimate: t.compose(&p.estimate), ..*p }).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    pub rmse: f64,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rmse = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[m] } else { 0.5 * (sorted[m - 1] + sorted[m]) };
        Self { mean, median, std: var.sqrt(), rmse }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub times: Vec<f64>,
    pub translational_cm: Vec<f64>,
    pub rotational_deg: Vec<f64>,
    pub translation: ErrorStats,
    pub rotation: ErrorStats,
}

impl AteReport {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `t,translational_cm,rotational_deg` per frame.
    pub fn errors_csv(&self) -> String {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| vec![self.times[i], self.translational_cm[i], self.rotational_deg[i]]).collect();
        numeric_csv("t,translational_cm,rotational_deg", &rows)
    }
}

/// Per-frame Euclidean distance (cm) and geodesic angle (deg), with no
/// alignment applied.
pub fn ate(pairs: &[SyncedPair]) -> Result<AteReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("no synchronized pairs"));
    }
    let times = pairs.iter().map(|p| p.t).collect();
    let translational_cm: Vec<f64> = pairs.iter().map(|p| 100.0 * (p.estimate.position - p.truth.position).norm()).collect();
    let rotational_deg: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let a = p.estimate.orientation.normalize().unwrap_or(p.estimate.orientation);
            let b = p.truth.orientation.normalize().unwrap_or(p.truth.orientation);
            rotation_angle_between(&a, &b).unwrap_or(f64::NAN).to_degrees()
        })
        .collect();
    Ok(AteReport {
        translation: ErrorStats::of(&translational_cm),
        rotation: ErrorStats::of(&rotational_deg),
        times,
        translational_cm,
        rotational_deg,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub frames: usize,
    pub translation: ErrorStats,
    pub rotation: ErrorStats,
}

/// Rows sorted by variant name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn ablation_table(reports: &BTreeMap<String, AteReport>) -> Result<AblationTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewVariants(reports.len()));
    }
    let rows = reports
        .iter()
        .map(|(name, r)| AblationRow { variant: name.clone(), frames: r.len(), translation: r.translation, rotation: r.rotation })
        .collect();
    Ok(AblationTable { rows })
}

const COLUMNS: [&str; 8] = ["t_mean_cm", "t_median_cm", "t_std_cm", "t_rmse_cm", "r_mean_deg", "r_median_deg", "r_std_deg", "r_rmse_deg"];

fn stat_values(row: &AblationRow) -> [f64; 8] {
    let (t, r) = (row.translation, row.rotation);
    [t.mean, t.median, t.std, t.rmse, r.mean, r.median, r.std, r.rmse]
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,frames,{}\n", COLUMNS.join(","));
        for row in &self.rows {
            let vals: Vec<String> = stat_values(row).iter().map(|v| fmt_g9(*v)).collect();
            let _ = writeln!(out, "{},{},{}", row.variant, row.frames, vals.join(","));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("variant".len());
        let mut out = format!("{:<width$}  {:>6}", "variant", "frames");
        for c in COLUMNS {
            let _ = write!(out, "  {c:>12}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<width$}  {:>6}", row.variant, row.frames);
            for v in stat_values(row) {
                let _ = write!(out, "  {v:>12.4}");
            }
            out.push('\n');
        }
        out
    }
}
