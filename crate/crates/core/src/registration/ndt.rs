use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use super::{AlignmentResult, RegistrationError};
use crate::exec::Exec;
use crate::geometry::{skew, Pose, Vec3};
use crate::radar_sim::RadarScan;

/// Cells need this many points before they take part in scoring.
pub const MIN_CELL_POINTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NdtCell {
    pub count: usize,
    pub mean: Vec3,
    /// Sum of outer products of deviations from the running mean.
    scatter: Matrix3<f64>,
    /// Regularized covariance; meaningful once `count >= MIN_CELL_POINTS`.
    pub covariance: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl NdtCell {
    fn new() -> Self {
        Self {
            count: 0,
            mean: Vec3::zeros(),
            scatter: Matrix3::zeros(),
            covariance: Matrix3::zeros(),
            inverse: Matrix3::zeros(),
        }
    }

    /// Welford update of mean and scatter.
    fn push(&mut self, x: &Vec3) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.scatter += delta * (x - self.mean).transpose();
    }

    /// Unbiased sample covariance without regularization.
    pub fn sample_covariance(&self) -> Matrix3<f64> {
        if self.count < 2 {
            return Matrix3::zeros();
        }
        let s = self.scatter / (self.count - 1) as f64;
        0.5 * (s + s.transpose())
    }

    pub fn is_valid(&self) -> bool {
        self.count >= MIN_CELL_POINTS
    }

    fn refresh(&mut self, floor: f64) {
        if !self.is_valid() {
            return;
        }
        let eig = SymmetricEigen::new(self.sample_covariance());
        let values = eig.eigenvalues.map(|l| l.max(floor));
        let v = eig.eigenvectors;
        self.covariance = v * Matrix3::from_diagonal(&values) * v.transpose();
        self.inverse = v * Matrix3::from_diagonal(&values.map(|l| 1.0 / l)) * v.transpose();
    }
}

/// Voxelized Gaussian statistics of an accumulated point cloud.
///
/// Cells are indexed in a grid frame placed at `origin` in the world, so the
/// whole map can be moved rigidly without re-binning.
#[derive(Clone, Debug, PartialEq)]
pub struct NdtMap {
    pub cell_size: f64,
    pub origin: Pose,
    pub cells: BTreeMap<[i64; 3], NdtCell>,
    pub total_points: usize,
}

impl NdtMap {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        Self { cell_size, origin: Pose::IDENTITY, cells: BTreeMap::new(), total_points: 0 }
    }

    /// Eigenvalue floor of cell covariances: `(0.1 · cell_size)²`.
    pub fn covariance_floor(&self) -> f64 {
        (0.1 * self.cell_size).powi(2)
    }

    fn key(&self, grid: &Vec3) -> [i64; 3] {
        let k = |v: f64| (v / self.cell_size).floor() as i64;
        [k(grid.x), k(grid.y), k(grid.z)]
    }

    /// Adds world-frame points.
    pub fn insert(&mut self, points: &[Vec3]) {
        let to_grid = self.origin.inverse();
        let mut touched = Vec::new();
        for p in points {
            let g = to_grid.transform_point(p);
            let key = self.key(&g);
            self.cells.entry(key).or_insert_with(NdtCell::new).push(&g);
            touched.push(key);
        }
        touched.sort_unstable();
        touched.dedup();
        let floor = self.covariance_floor();
        for key in touched {
            if let Some(cell) = self.cells.get_mut(&key) {
                cell.refresh(floor);
            }
        }
        self.total_points += points.len();
    }

    pub fn valid_cells(&self) -> usize {
        self.cells.values().filter(|c| c.is_valid()).count()
    }

    /// The same map moved rigidly by `t` (applied in the world frame).
    pub fn transformed(&self, t: &Pose) -> NdtMap {
        NdtMap { origin: t.compose(&self.origin), ..self.clone() }
    }

    /// Cells as CSV: grid index, count, mean and covariance upper triangle,
    /// all in the grid frame.
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<f64>> = self
            .cells
            .iter()
            .map(|(k, c)| {
                let s = &c.covariance;
                vec![
                    k[0] as f64,
                    k[1] as f64,
                    k[2] as f64,
                    c.count as f64,
                    c.mean.x,
                    c.mean.y,
                    c.mean.z,
                    s[(0, 0)],
                    s[(0, 1)],
                    s[(0, 2)],
                    s[(1, 1)],
                    s[(1, 2)],
                    s[(2, 2)],
                ]
            })
            .collect();
        crate::io::numeric_csv("ix,iy,iz,count,mx,my,mz,cxx,cxy,cxz,cyy,cyz,czz", &rows)
    }
}

/// Value-semantics form of [`NdtMap::insert`].
pub fn ndt_insert(mut map: NdtMap, points: &[Vec3]) -> NdtMap {
    map.insert(points);
    map
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreTerms {
    pub score: f64,
    /// Derivatives with respect to `(δt, δθ)` where the perturbed pose maps
    /// `p ↦ Exp(δθ)·R·p + t + δt`.
    pub gradient: Vector6<f64>,
    pub hessian: Matrix6<f64>,
    /// Scan points that landed in a valid cell.
    pub hits: usize,
}

/// NDT likelihood of `points` (sensor frame) at `pose`, with analytic
/// gradient and Hessian.
pub fn ndt_score(map: &NdtMap, points: &[Vec3], pose: &Pose) -> Result<ScoreTerms, RegistrationError> {
    score_terms(map, points, pose, Exec::default(), true)
}

type PointTerm = (f64, Vector6<f64>, Matrix6<f64>);

fn point_term(map: &NdtMap, to_grid: &Pose, r_o_t: &Matrix3<f64>, pose: &Pose, p: &Vec3, derivs: bool) -> Option<PointTerm> {
    let r = pose.orientation.rotate(p);
    let g = to_grid.transform_point(&(r + pose.position));
    let cell = map.cells.get(&map.key(&g)).filter(|c| c.is_valid())?;
    let d = g - cell.mean;
    let cd = cell.inverse * d;
    let s = (-0.5 * d.dot(&cd)).exp();
    if !derivs {
        return Some((s, Vector6::zeros(), Matrix6::zeros()));
    }
    // J = R_oᵀ [I | −[r]×]
    let mut jac = nalgebra::Matrix3x6::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(r_o_t);
    jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_o_t * skew(&r)));
    let gk: Vector6<f64> = jac.transpose() * cd;
    let gradient = -s * gk;
    let mut hessian = s * (gk * gk.transpose()) - s * (jac.transpose() * cell.inverse * jac);
    // second derivative of Exp(θ)r at θ = 0: ½(e_i r_j + e_j r_i) − δ_ij r
    let w = r_o_t.transpose() * cd;
    for i in 0..3 {
        for j in 0..3 {
            let mut h = 0.5 * (w[i] * r[j] + w[j] * r[i]);
            if i == j {
                h -= w.dot(&r);
            }
            hessian[(3 + i, 3 + j)] -= s * h;
        }
    }
    Some((s, gradient, hessian))
}

pub(crate) fn score_terms(
    map: &NdtMap,
    points: &[Vec3],
    pose: &Pose,
    exec: Exec,
    derivs: bool,
) -> Result<ScoreTerms, RegistrationError> {
    let to_grid = map.origin.inverse();
    let r_o_t = map.origin.rotation_matrix().transpose();
    let terms = exec.map_slice(points, |p| point_term(map, &to_grid, &r_o_t, pose, p, derivs));
    let mut out = ScoreTerms { score: 0.0, gradient: Vector6::zeros(), hessian: Matrix6::zeros(), hits: 0 };
    for (s, g, h) in terms.into_iter().flatten() {
        out.score += s;
        out.gradient += g;
        out.hessian += h;
        out.hits += 1;
    }
    if out.hits == 0 {
        return Err(RegistrationError::ZeroOverlap);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NdtOptions {
    pub cell_size: f64,
    pub max_iterations: usize,
    pub translation_tolerance: f64,
    pub rotation_tolerance: f64,
    /// Largest translation (m) and rotation (rad) taken in one iteration.
    pub max_translation_step: f64,
    pub max_rotation_step: f64,
    /// A result only counts as converged if at least this fraction of scan
    /// points overlaps valid cells.
    pub min_match_fraction: f64,
}

impl Default for NdtOptions {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            max_iterations: 30,
            translation_tolerance: 1e-4,
            rotation_tolerance: 1e-4,
            max_translation_step: 0.2,
            max_rotation_step: 0.15,
            min_match_fraction: 0.5,
        }
    }
}

impl NdtOptions {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let ok = self.cell_size > 0.0
            && self.max_iterations >= 1
            && self.translation_tolerance > 0.0
            && self.rotation_tolerance > 0.0
            && self.max_translation_step > 0.0
            && self.max_rotation_step > 0.0
            && (0.0..=1.0).contains(&self.min_match_fraction);
        if ok {
            Ok(())
        } else {
            Err(RegistrationError::InvalidOptions("NDT options out of range".into()))
        }
    }
}

pub fn ndt_align(map: &NdtMap, scan: &RadarScan, initial: &Pose, opts: &NdtOptions) -> Result<AlignmentResult, RegistrationError> {
    let points: Vec<Vec3> = scan.points.iter().map(|p| p.position).collect();
    ndt_align_points(map, &points, initial, opts, Exec::default())
}

/// Newton ascent on the NDT likelihood with Levenberg damping, a gradient
/// fallback, a step clamp and backtracking so the score never decreases.
pub fn ndt_align_points(
    map: &NdtMap,
    points: &[Vec3],
    initial: &Pose,
    opts: &NdtOptions,
    exec: Exec,
) -> Result<AlignmentResult, RegistrationError> {
    opts.validate()?;
    let mut pose = *initial;
    let mut terms = score_terms(map, points, &pose, exec, true)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut step = newton_step(&terms).unwrap_or_else(|| terms.gradient.normalize() * opts.max_translation_step);
        if !step.iter().all(|v| v.is_finite()) {
            return Err(RegistrationError::SingularStep);
        }
        let (dt_norm, dr_norm) = (step.fixed_rows::<3>(0).norm(), step.fixed_rows::<3>(3).norm());
        let clamp = (opts.max_translation_step / dt_norm.max(1e-300)).min(opts.max_rotation_step / dr_norm.max(1e-300)).min(1.0);
        step *= clamp;

        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..16 {
            let s = step * scale;
            let candidate = pose.retract(&s.fixed_rows::<3>(0).into(), &s.fixed_rows::<3>(3).into());
            if let Ok(t) = score_terms(map, points, &candidate, exec, false) {
                if t.score >= terms.score {
                    accepted = Some((candidate, s));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, taken)) = accepted else {
            // no ascent direction left at this resolution
            converged = true;
            break;
        };
        pose = candidate;
        terms = score_terms(map, points, &pose, exec, true)?;
        if taken.fixed_rows::<3>(0).norm() < opts.translation_tolerance && taken.fixed_rows::<3>(3).norm() < opts.rotation_tolerance {
            converged = true;
            break;
        }
    }
    let match_fraction = terms.hits as f64 / points.len().max(1) as f64;
    Ok(AlignmentResult {
        pose,
        score: terms.score,
        iterations,
        converged: converged && match_fraction >= opts.min_match_fraction,
        match_fraction,
    })
}

/// Solves `(−H + μI) δ = g`, raising μ until the system is positive
/// definite.
fn newton_step(terms: &ScoreTerms) -> Option<Vector6<f64>> {
    let a = -terms.hessian;
    if !a.iter().all(|v| v.is_finite()) {
        return None;
    }
    let scale = (a.trace().abs() / 6.0).max(1e-12);
    let mut mu = 0.0;
    for _ in 0..12 {
        if let Some(chol) = (a + Matrix6::identity() * mu).cholesky() {
            return Some(chol.solve(&terms.gradient));
        }
        mu = if mu == 0.0 { 1e-6 * scale } else { mu * 10.0 };
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Points on a few blobs and wall strips, with height spread.
    pub(crate) fn clustered_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        let centres: Vec<Vec3> = (0..12)
            .map(|_| Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-0.2..0.5)))
            .collect();
        (0..n)
            .map(|i| {
                let c = centres[i % centres.len()];
                c + Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2))
            })
            .collect()
    }

    #[test]
    fn single_point_cell_is_excluded() {
        let mut map = NdtMap::new(0.5);
        map.insert(&[Vec3::new(0.1, 0.1, 0.1)]);
        assert_eq!(map.cells.len(), 1);
        assert_eq!(map.cells.values().next().unwrap().count, 1);
        assert_eq!(map.valid_cells(), 0);
        assert_eq!(ndt_score(&map, &[Vec3::new(0.1, 0.1, 0.1)], &Pose::IDENTITY), Err(RegistrationError::ZeroOverlap));
    }

    #[test]
    fn collinear_points_get_floored_covariance() {
        let mut map = NdtMap::new(0.5);
        map.insert(&[Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.1, 0.1), Vec3::new(0.3, 0.1, 0.1)]);
        let cell = map.cells.values().next().unwrap();
        let eig = SymmetricEigen::new(cell.covariance);
        for l in eig.eigenvalues.iter() {
            assert!(*l >= map.covariance_floor() * (1.0 - 1e-12));
        }
        assert!(cell.covariance.cholesky().is_some());
    }

    #[test]
    fn incremental_statistics_match_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| {
                let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                Vec3::new(50.0 + 0.8 * z[0], 50.0 + 0.5 * z[1] + 0.2 * z[0], 50.0 + 0.3 * z[2])
            })
            .collect();
        let mut map = NdtMap::new(100.0);
        // two batches exercise the incremental path
        map.insert(&pts[..400]);
        map.insert(&pts[400..]);
        assert_eq!(map.cells.len(), 1);
        assert_eq!(map.total_points, 1000);
        let cell = map.cells.values().next().unwrap();
        let mean = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / 1000.0;
        let cov = pts.iter().fold(Matrix3::zeros(), |a, p| a + (p - mean) * (p - mean).transpose()) / 999.0;
        assert!((cell.mean - mean).norm() < 1e-6);
        assert!((cell.sample_covariance() - cov).abs().max() < 1e-6);
    }

    #[test]
    fn points_at_means_score_one_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut map = NdtMap::new(0.5);
        map.insert(&clustered_cloud(&mut rng, 300));
        let means: Vec<Vec3> = map.cells.values().filter(|c| c.is_valid()).map(|c| c.mean).collect();
        let t = ndt_score(&map, &means, &Pose::IDENTITY).unwrap();
        assert_eq!(t.hits, means.len());
        assert_abs_diff_eq!(t.score, means.len() as f64, epsilon = 1e-12);
        assert_eq!(t.gradient, Vector6::zeros());

        let r = ndt_align_points(&map, &means, &Pose::IDENTITY, &NdtOptions::default(), Exec::default()).unwrap();
        assert!(r.converged && r.iterations <= 2);
        assert!(r.pose.position.norm() < 1e-6);
        assert!(crate::geometry::rotation_angle_between(&r.pose.orientation, &Quaternion::IDENTITY).unwrap() < 1e-6);
    }

    /// Central finite differences of the score along `(δt, δθ)`.
    fn numeric_derivatives(map: &NdtMap, pts: &[Vec3], pose: &Pose, h: f64) -> (Vector6<f64>, Matrix6<f64>) {
        let at = |d: &Vector6<f64>| {
            let p = pose.retract(&d.fixed_rows::<3>(0).into(), &d.fixed_rows::<3>(3).into());
            score_terms(map, pts, &p, Exec::Sequential, true).unwrap()
        };
        let mut g = Vector6::zeros();
        let mut hess = Matrix6::zeros();
        for k in 0..6 {
            let mut e = Vector6::zeros();
            e[k] = h;
            let (plus, minus) = (at(&e), at(&-e));
            g[k] = (plus.score - minus.score) / (2.0 * h);
            let col = (plus.gradient - minus.gradient) / (2.0 * h);
            hess.set_column(k, &col);
        }
        (g, hess)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = clustered_cloud(&mut rng, 400);
        let mut map = NdtMap::new(0.5);
        map.insert(&cloud);
        let pose = Pose::new(Vec3::new(0.03, -0.02, 0.01), Quaternion::from_rotation_vector(&Vec3::new(0.01, -0.02, 0.04)));
        let scan: Vec<Vec3> = pose.inverse().compose(&Pose::planar(0.02, 0.01, 0.01)).pipe_points(&cloud[..200]);
        let analytic = ndt_score(&map, &scan, &pose).unwrap();
        let (g, _) = numeric_derivatives(&map, &scan, &pose, 1e-6);
        let rel = (analytic.gradient - g).norm() / g.norm();
        assert!(rel < 1e-5, "relative gradient error {rel}");
    }

    #[test]
    fn analytic_hessian_matches_differentiated_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = clustered_cloud(&mut rng, 400);
        let mut map = NdtMap::new(0.5);
        map.insert(&cloud);
        let pose = Pose::new(Vec3::new(0.5, 0.2, 0.0), Quaternion::from_yaw(0.3));
        let scan: Vec<Vec3> = pose.inverse().compose(&Pose::planar(0.03, 0.0, 0.02)).pipe_points(&cloud[..150]);
        let analytic = ndt_score(&map, &scan, &pose).unwrap();
        // the analytic Hessian is of the left-perturbed score at δ = 0; the
        // gradient's Jacobian under retraction differs by the Lie bracket
        // term, which is antisymmetric, so compare symmetric parts
        let (_, h) = numeric_derivatives(&map, &scan, &pose, 1e-6);
        let sym = 0.5 * (h + h.transpose());
        let rel = (analytic.hessian - sym).norm() / sym.norm();
        assert!(rel < 1e-4, "relative Hessian error {rel}");
    }

    trait PipePoints {
        fn pipe_points(&self, pts: &[Vec3]) -> Vec<Vec3>;
    }

    impl PipePoints for Pose {
        fn pipe_points(&self, pts: &[Vec3]) -> Vec<Vec3> {
            pts.iter().map(|p| self.transform_point(p)).collect()
        }
    }

    #[test]
    fn recovers_small_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = clustered_cloud(&mut rng, 200);
        let mut map = NdtMap::new(0.5);
        map.insert(&cloud);
        let truth = Pose::IDENTITY;
        let initial = Pose::planar(0.05, 0.02, 3f64.to_radians());
        let r = ndt_align_points(&map, &cloud, &initial, &NdtOptions::default(), Exec::default()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.pose.position - truth.position).norm() < 0.01);
        let angle = crate::geometry::rotation_angle_between(&r.pose.orientation, &truth.orientation).unwrap();
        assert!(angle < 0.5f64.to_radians());
        assert!(r.iterations <= 30);
    }

    #[test]
    fn far_initial_guess_does_not_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cloud = clustered_cloud(&mut rng, 200);
        let mut map = NdtMap::new(0.5);
        map.insert(&cloud);
        match ndt_align_points(&map, &cloud, &Pose::planar(5.0, 0.0, 0.0), &NdtOptions::default(), Exec::default()) {
            Ok(r) => assert!(!r.converged, "{r:?}"),
            Err(e) => assert_eq!(e, RegistrationError::ZeroOverlap),
        }
    }

    #[test]
    fn score_never_decreases_along_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = clustered_cloud(&mut rng, 300);
        let mut map = NdtMap::new(0.5);
        map.insert(&cloud);
        let initial = Pose::planar(0.08, -0.04, 0.06);
        let mut last = ndt_score(&map, &cloud, &initial).unwrap().score;
        for k in 1..=10 {
            let opts = NdtOptions { max_iterations: k, ..Default::default() };
            let r = ndt_align_points(&map, &cloud, &initial, &opts, Exec::Sequential).unwrap();
            assert!(r.score >= last - 1e-12);
            last = r.score;
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = clustered_cloud(&mut rng, 300);
        let mut map = NdtMap::new(0.5);
        map.insert(&cloud);
        let initial = Pose::planar(0.05, 0.05, 0.02);
        let a = ndt_align_points(&map, &cloud, &initial, &NdtOptions::default(), Exec::Sequential).unwrap();
        let b = ndt_align_points(&map, &cloud, &initial, &NdtOptions::default(), Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn map_dump_has_one_row_per_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut map = NdtMap::new(0.5);
        map.insert(&clustered_cloud(&mut rng, 100));
        let csv = map.to_csv();
        assert_eq!(csv.lines().count(), map.cells.len() + 1);
        assert!(csv.starts_with("ix,iy,iz,count,"));
    }

    proptest! {
        #[test]
        fn score_is_rigidly_invariant(seed in any::<u64>(), x in -5.0..5.0f64, y in -5.0..5.0f64, yaw in -3.0..3.0f64, roll in -0.3..0.3f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = clustered_cloud(&mut rng, 200);
            let mut map = NdtMap::new(0.5);
            map.insert(&cloud);
            let pose = Pose::planar(0.02, -0.03, 0.05);
            let scan = pose.inverse().pipe_points(&cloud[..100]);
            let t = Pose::new(Vec3::new(x, y, 0.3), Quaternion::from_rotation_vector(&Vec3::new(roll, 0.0, yaw)));
            let a = ndt_score(&map, &scan, &pose).unwrap();
            let b = ndt_score(&map.transformed(&t), &scan, &t.compose(&pose)).unwrap();
            prop_assert_eq!(a.hits, b.hits);
            prop_assert!((a.score - b.score).abs() <= 1e-6 * a.score.abs());
        }
    }
}
