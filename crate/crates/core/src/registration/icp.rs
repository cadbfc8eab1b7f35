use std::collections::HashMap;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{AlignmentResult, RegistrationError};
use crate::geometry::{Pose, Quaternion, Vec3};

/// Point cloud with a uniform hash grid for radius-bounded nearest neighbours.
#[derive(Clone, Debug, Default)]
pub struct PointMap {
    cell: f64,
    grid: HashMap<[i64; 3], Vec<usize>>,
    points: Vec<Vec3>,
}

impl PointMap {
    /// `cell` should be at least the largest search radius used.
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        Self { cell, grid: HashMap::new(), points: Vec::new() }
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        let k = |v: f64| (v / self.cell).floor() as i64;
        [k(p.x), k(p.y), k(p.z)]
    }

    pub fn insert(&mut self, points: &[Vec3]) {
        for p in points {
            let key = self.key(p);
            self.grid.entry(key).or_default().push(self.points.len());
            self.points.push(*p);
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Closest stored point within `radius` (≤ cell size); ties go to the
    /// earliest inserted point.
    pub fn nearest(&self, q: &Vec3, radius: f64) -> Option<(usize, f64)> {
        let [x, y, z] = self.key(q);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.grid.get(&[x + dx, y + dy, z + dz]) else { continue };
                    for &i in ids {
                        let d2 = (self.points[i] - q).norm_squared();
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                        };
                        if better {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        best.filter(|(_, d2)| *d2 <= radius * radius).map(|(i, d2)| (i, d2.sqrt()))
    }
}

/// Least-squares rigid transform with `dst ≈ R·src + t` (Kabsch/SVD).
/// `None` for fewer than three pairs or mismatched lengths.
pub fn rigid_transform_svd(src: &[Vec3], dst: &[Vec3]) -> Option<Pose> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let h = src.iter().zip(dst).fold(Matrix3::zeros(), |a, (s, d)| a + (s - cs) * (d - cd).transpose());
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = (v * u.transpose()).determinant().signum();
    let r = v * fix * u.transpose();
    let q = Quaternion::from_rotation_matrix(&r).normalize().ok()?;
    let t = cd - q.rotate(&cs);
    Some(Pose::new(t, q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpOptions {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    pub translation_tolerance: f64,
    pub rotation_tolerance: f64,
    pub min_match_fraction: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            max_correspondence_distance: 0.3,
            max_iterations: 30,
            translation_tolerance: 1e-4,
            rotation_tolerance: 1e-4,
            min_match_fraction: 0.5,
        }
    }
}

/// Point-to-point ICP of sensor-frame `scan` points against `target`.
pub fn icp_align(target: &PointMap, scan: &[Vec3], initial: &Pose, opts: &IcpOptions) -> Result<AlignmentResult, RegistrationError> {
    if !(opts.max_correspondence_distance > 0.0 && opts.max_iterations >= 1) {
        return Err(RegistrationError::InvalidOptions("ICP options out of range".into()));
    }
    let radius = opts.max_correspondence_distance.min(target.cell);
    let correspondences = |pose: &Pose| {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut sq = 0.0;
        for p in scan {
            let w = pose.transform_point(p);
            if let Some((i, d)) = target.nearest(&w, radius) {
                src.push(w);
                dst.push(target.points[i]);
                sq += d * d;
            }
        }
        (src, dst, sq)
    };

    let mut pose = *initial;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (src, dst, _) = correspondences(&pose);
        if src.len() < 3 {
            return Err(RegistrationError::InsufficientCorrespondences(src.len()));
        }
        let delta = rigid_transform_svd(&src, &dst).ok_or(RegistrationError::SingularStep)?;
        pose = delta.compose(&pose);
        pose.orientation = pose.orientation.normalize().map_err(|_| RegistrationError::SingularStep)?;
        let angle = delta.orientation.to_rotation_vector().norm();
        if delta.position.norm() < opts.translation_tolerance && angle < opts.rotation_tolerance {
            converged = true;
            break;
        }
    }
    let (src, _, sq) = correspondences(&pose);
    if src.len() < 3 {
        return Err(RegistrationError::InsufficientCorrespondences(src.len()));
    }
    let match_fraction = src.len() as f64 / scan.len().max(1) as f64;
    Ok(AlignmentResult {
        pose,
        score: -sq / src.len() as f64,
        iterations,
        converged: converged && match_fraction >= opts.min_match_fraction,
        match_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle_between;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-0.5..0.5))).collect()
    }

    fn map_of(points: &[Vec3]) -> PointMap {
        let mut m = PointMap::new(0.5);
        m.insert(points);
        m
    }

    #[test]
    fn nearest_neighbour_matches_linear_scan() {
        let pts = cloud(1, 500);
        let map = map_of(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let q = Vec3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-0.5..0.5));
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .filter(|(_, d)| *d <= 0.4)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(map.nearest(&q, 0.4).map(|x| x.0), brute.map(|x| x.0));
        }
    }

    #[test]
    fn identical_clouds_give_identity() {
        let pts = cloud(3, 200);
        let r = icp_align(&map_of(&pts), &pts, &Pose::IDENTITY, &IcpOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.pose.position.norm() < 1e-12);
        assert_eq!(r.match_fraction, 1.0);
    }

    #[test]
    fn recovers_known_small_transform() {
        let pts = cloud(4, 300);
        let truth = Pose::planar(0.04, -0.03, 2f64.to_radians());
        let scan: Vec<Vec3> = pts.iter().map(|p| truth.inverse().transform_point(p)).collect();
        let r = icp_align(&map_of(&pts), &scan, &Pose::IDENTITY, &IcpOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.pose.position - truth.position).norm() < 0.01);
        assert!(rotation_angle_between(&r.pose.orientation, &truth.orientation).unwrap() < 0.5f64.to_radians());
    }

    #[test]
    fn two_point_cloud_is_rejected() {
        let pts = cloud(5, 2);
        assert_eq!(
            icp_align(&map_of(&pts), &pts, &Pose::IDENTITY, &IcpOptions::default()),
            Err(RegistrationError::InsufficientCorrespondences(2))
        );
        assert!(rigid_transform_svd(&pts, &pts).is_none());
    }

    proptest! {
        #[test]
        fn svd_solve_is_exact_on_clean_pairs(seed in any::<u64>(), yaw in -3.1..3.1f64, roll in -1.0..1.0f64, tx in -5.0..5.0f64) {
            let src = cloud(seed, 12);
            let truth = Pose::new(Vec3::new(tx, 1.0, -0.5), Quaternion::from_rotation_vector(&Vec3::new(roll, 0.2, yaw)));
            let dst: Vec<Vec3> = src.iter().map(|p| truth.transform_point(p)).collect();
            let est = rigid_transform_svd(&src, &dst).unwrap();
            prop_assert!((est.position - truth.position).norm() < 1e-9);
            prop_assert!(rotation_angle_between(&est.orientation, &truth.orientation).unwrap() < 1e-9);
        }
    }
}
