use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: Vec3,
    /// Radar cross-section scale; received power is `reflectivity / range⁴`.
    pub reflectivity: f64,
}

impl Landmark {
    pub fn new(position: Vec3, reflectivity: f64) -> Self {
        Self { position, reflectivity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Range jitter after bin quantization (m).
    pub range_sigma: f64,
    /// Boresight bearing jitter (rad); realized as phase noise, so it grows
    /// off-axis.
    pub azimuth_sigma: f64,
    /// Log-normal spread of received power.
    pub intensity_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { range_sigma: 0.01, azimuth_sigma: 0.003, intensity_sigma: 0.2 }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self { range_sigma: 0.0, azimuth_sigma: 0.0, intensity_sigma: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub landmarks: Vec<Landmark>,
    /// Probability that a detection spawns a multipath ghost behind it.
    pub ghost_rate: f64,
    /// Probability that a visible landmark is missed in a frame.
    pub dropout_rate: f64,
    pub noise: NoiseModel,
    /// Ghost power is drawn uniformly below this level, the weak band that a
    /// minimum-intensity gate is meant to remove.
    pub ghost_intensity_ceiling: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            landmarks: Vec::new(),
            ghost_rate: 0.1,
            dropout_rate: 0.05,
            noise: NoiseModel::default(),
            ghost_intensity_ceiling: 1.0,
        }
    }
}

/// Room geometry for [`Environment::office`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfficeLayout {
    pub min: [f64; 2],
    pub max: [f64; 2],
    /// Mean distance between reflectors along the walls (m).
    pub wall_spacing: f64,
    /// Free-standing reflectors (desks, chairs, cabinets) per m².
    pub clutter_density: f64,
    /// Keep clutter at least this far from the path (m).
    pub clearance: f64,
    /// Points the path passes through, used for the clearance test.
    pub path: Vec<Vec3>,
    pub reflectivity_range: (f64, f64),
}

impl OfficeLayout {
    /// Room enclosing the path with a three-metre margin.
    pub fn around(path: &[Vec3]) -> Self {
        let margin = 3.0;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in path {
            lo = [lo[0].min(p.x), lo[1].min(p.y)];
            hi = [hi[0].max(p.x), hi[1].max(p.y)];
        }
        if path.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let step = (path.len() / 400).max(1);
        Self {
            min: [lo[0] - margin, lo[1] - margin],
            max: [hi[0] + margin, hi[1] + margin],
            wall_spacing: 0.6,
            clutter_density: 0.2,
            clearance: 0.8,
            path: path.iter().step_by(step).copied().collect(),
            reflectivity_range: (2e6, 2e7),
        }
    }
}

const MIN_LANDMARK_SPACING: f64 = 0.3;
const HEIGHT_RANGE: (f64, f64) = (-0.3, 0.6);

impl Environment {
    /// Walls lined with reflectors plus scattered clutter, deterministic in
    /// `seed`. Noise, ghost and dropout settings take their defaults.
    pub fn office(layout: &OfficeLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo_r, hi_r) = layout.reflectivity_range;
        let reflectivity = |rng: &mut ChaCha8Rng| (rng.gen_range(lo_r.ln()..hi_r.ln())).exp();
        let mut landmarks: Vec<Landmark> = Vec::new();
        let [x0, y0] = layout.min;
        let [x1, y1] = layout.max;
        let corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)];
        for w in corners.windows(2) {
            let ((ax, ay), (bx, by)) = (w[0], w[1]);
            let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
            let n = (len / layout.wall_spacing).floor() as usize;
            let (ux, uy) = ((bx - ax) / len, (by - ay) / len);
            for i in 0..n {
                let s = (i as f64 + 0.5) * layout.wall_spacing + rng.gen_range(-0.15..0.15);
                let off = rng.gen_range(-0.05..0.05);
                let z = rng.gen_range(HEIGHT_RANGE.0..HEIGHT_RANGE.1);
                let r = reflectivity(&mut rng);
                landmarks.push(Landmark::new(Vec3::new(ax + ux * s - uy * off, ay + uy * s + ux * off, z), r));
            }
        }
        let area = (x1 - x0) * (y1 - y0);
        let target = (layout.clutter_density * area).round() as usize;
        let mut attempts = 0;
        let mut placed = 0;
        while placed < target && attempts < target * 50 {
            attempts += 1;
            let p = Vec3::new(
                rng.gen_range(x0 + 0.3..x1 - 0.3),
                rng.gen_range(y0 + 0.3..y1 - 0.3),
                rng.gen_range(HEIGHT_RANGE.0..HEIGHT_RANGE.1),
            );
            let r = reflectivity(&mut rng);
            let near_path = layout.path.iter().any(|q| {
                let d = Vec3::new(p.x - q.x, p.y - q.y, 0.0);
                d.norm() < layout.clearance
            });
            let crowded = landmarks.iter().any(|l| (l.position - p).norm() < MIN_LANDMARK_SPACING);
            if near_path || crowded {
                continue;
            }
            landmarks.push(Landmark::new(p, r));
            placed += 1;
        }
        Self { landmarks, ..Default::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn office_is_deterministic_and_clear_of_path() {
        let path: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let layout = OfficeLayout::around(&path);
        let a = Environment::office(&layout, 11);
        let b = Environment::office(&layout, 11);
        assert_eq!(a, b);
        assert!(a.landmarks.len() > 60);
        for l in &a.landmarks {
            assert!(l.position.x >= layout.min[0] - 0.1 && l.position.x <= layout.max[0] + 0.1);
            let to_path = path.iter().map(|p| (l.position.xy() - p.xy()).norm()).fold(f64::INFINITY, f64::min);
            assert!(to_path >= 0.8 - 1e-9 || to_path > 2.0);
        }
        assert_ne!(a, Environment::office(&layout, 12));
    }
}
