//! Dataset and result file formats.
//!
//! Scans are JSON lines `{"t":…,"points":[[x,y,z,intensity,vr],…]}`; IMU and
//! poses are CSV. Floats are written with 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{Pose, Quaternion, Timestamped, Trajectory, Vec3};
use crate::radar_sim::{ImuSample, RadarPoint, RadarScan};

pub const SCANS_FILE: &str = "scans.jsonl";
pub const IMU_FILE: &str = "imu.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const IMU_HEADER: &str = "t,wx,wy,wz,ax,ay,az";
pub const POSE_HEADER: &str = "t,px,py,pz,qw,qx,qy,qz";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

/// `printf("%.9g")`: nine significant digits, trailing zeros trimmed,
/// exponent notation outside `[1e-4, 1e9)`.
pub fn fmt_g9(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..DIGITS).contains(&exp) {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa.to_string());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn join_g9(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_g9(*v));
    }
    out
}

/// Write through a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, contents).map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

pub fn scans_to_jsonl(scans: &[RadarScan]) -> String {
    let mut out = String::new();
    for scan in scans {
        let _ = write!(out, "{{\"t\":{},\"points\":[", fmt_g9(scan.t));
        for (i, p) in scan.points.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let v = [p.position.x, p.position.y, p.position.z, p.intensity, p.radial_velocity];
            let _ = write!(out, "[{}]", join_g9(&v));
        }
        out.push_str("]}\n");
    }
    out
}

pub fn imu_to_csv(samples: &[ImuSample]) -> String {
    let mut out = format!("{IMU_HEADER}\n");
    for s in samples {
        let mut row = vec![s.t];
        row.extend(s.to_array());
        out.push_str(&join_g9(&row));
        out.push('\n');
    }
    out
}

pub fn pose_row(t: f64, pose: &Pose) -> Vec<f64> {
    let (p, q) = (pose.position, pose.orientation);
    vec![t, p.x, p.y, p.z, q.w, q.x, q.y, q.z]
}

pub fn trajectory_to_csv(traj: &[Timestamped<Pose>]) -> String {
    let mut out = format!("{POSE_HEADER}\n");
    for s in traj {
        out.push_str(&join_g9(&pose_row(s.t, &s.value)));
        out.push('\n');
    }
    out
}

/// CSV with a header and rows of numbers, all in `%.9g`.
pub fn numeric_csv(header: &str, rows: &[Vec<f64>]) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&join_g9(r));
        out.push('\n');
    }
    out
}

#[derive(Deserialize)]
struct ScanLine {
    t: f64,
    points: Vec<[f64; 5]>,
}

fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|e| DataError::io(path, e))
}

fn check_monotonic(path: &Path, ts: impl Iterator<Item = f64>) -> Result<(), DataError> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in ts.enumerate() {
        if !t.is_finite() || t < 0.0 || t <= prev {
            return Err(DataError::Invalid {
                path: path.to_path_buf(),
                message: format!("timestamps must be finite, non-negative and increasing (row {})", i + 1),
            });
        }
        prev = t;
    }
    Ok(())
}

pub fn read_scans(path: &Path) -> Result<Vec<RadarScan>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut scans = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScanLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let points = parsed
            .points
            .iter()
            .map(|p| RadarPoint { position: Vec3::new(p[0], p[1], p[2]), intensity: p[3], radial_velocity: p[4] })
            .collect();
        scans.push(RadarScan { t: parsed.t, points });
    }
    check_monotonic(path, scans.iter().map(|s| s.t))?;
    Ok(scans)
}

fn read_numeric_csv(path: &Path, header: &str) -> Result<Vec<Vec<f64>>, DataError> {
    let text = read_file(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let found = reader
        .headers()
        .map_err(|e| DataError::Parse { path: path.to_path_buf(), line: 1, message: e.to_string() })?
        .iter()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",");
    if found != header {
        return Err(DataError::Invalid { path: path.to_path_buf(), message: format!("expected header `{header}`, found `{found}`") });
    }
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        if record.len() != width {
            return Err(DataError::Parse { path: path.to_path_buf(), line, message: format!("expected {width} fields") });
        }
        let row = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>, DataError> {
    let rows = read_numeric_csv(path, IMU_HEADER)?;
    check_monotonic(path, rows.iter().map(|r| r[0]))?;
    Ok(rows
        .iter()
        .map(|r| ImuSample {
            t: r[0],
            angular_velocity: Vec3::new(r[1], r[2], r[3]),
            linear_acceleration: Vec3::new(r[4], r[5], r[6]),
        })
        .collect())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, DataError> {
    let rows = read_numeric_csv(path, POSE_HEADER)?;
    check_monotonic(path, rows.iter().map(|r| r[0]))?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let q = Quaternion::new(r[4], r[5], r[6], r[7]).normalize().map_err(|_| DataError::Invalid {
                path: path.to_path_buf(),
                message: format!("zero quaternion at row {}", i + 1),
            })?;
            Ok(Timestamped { t: r[0], value: Pose::new(Vec3::new(r[1], r[2], r[3]), q) })
        })
        .collect()
}

/// A recorded (or simulated) sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub scans: Vec<RadarScan>,
    pub imu: Vec<ImuSample>,
    pub ground_truth: Trajectory,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        Ok(Self {
            scans: read_scans(&dir.join(SCANS_FILE))?,
            imu: read_imu(&dir.join(IMU_FILE))?,
            ground_truth: read_trajectory(&dir.join(GROUND_TRUTH_FILE))?,
        })
    }

    /// Writes the three dataset files and returns their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, DataError> {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let files = [
            (SCANS_FILE, scans_to_jsonl(&self.scans)),
            (IMU_FILE, imu_to_csv(&self.imu)),
            (GROUND_TRUTH_FILE, trajectory_to_csv(&self.ground_truth)),
        ];
        let mut paths = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            write_atomic(&path, text.as_bytes())?;
            paths.push(path);
        }
        Ok(paths)
    }
}
