//! Point association between consecutive radar scans.
//!
//! Candidate pairs pass a gating policy, survivors are scored
//! `D = 1 / (1 + ‖o_i − o_j‖²)`, and an optimal one-to-one assignment on
//! `1 − D` is filtered by a score threshold.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::Quaternion;
use crate::radar_sim::{RadarPoint, RadarScan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("cost matrix entry ({0}, {1}) is not finite")]
    NonFiniteCost(usize, usize),
    #[error("invalid policy parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// Optimal assignment, then score threshold.
    Munkres,
    /// Highest scores first, skipping pairs whose endpoints are taken.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    /// Squared-distance gate (m²).
    pub max_value: f64,
    /// Squared lateral (sensor y) gate (m²).
    pub max_lateral: f64,
    /// Both endpoints of a pair must be at least this strong.
    pub min_intensity: f64,
    /// Assigned pairs need a score strictly above this.
    pub score_threshold: f64,
    /// Expected sign of the longitudinal change `x_t − x_{t−1}` of a static
    /// point; `−1` when the sensor moves along +x.
    pub forward_axis_sign: f64,
    /// Longitudinal changes against the expected sign are tolerated up to
    /// this magnitude (m), to absorb range noise.
    pub longitudinal_slack: f64,
    pub strategy: MatchStrategy,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            max_value: 0.2 * 0.2,
            max_lateral: 0.1 * 0.1,
            min_intensity: 1.0,
            score_threshold: 0.9,
            forward_axis_sign: -1.0,
            longitudinal_slack: 0.06,
            strategy: MatchStrategy::Munkres,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), AssociationError> {
        let bad = |m: &str| Err(AssociationError::InvalidParams(m.to_string()));
        if !(self.max_value > 0.0) {
            return bad("max_value must be positive");
        }
        if !(self.max_lateral > 0.0) {
            return bad("max_lateral must be positive");
        }
        if !(self.min_intensity >= 0.0) {
            return bad("min_intensity must be non-negative");
        }
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return bad("score_threshold must lie in (0, 1]");
        }
        if self.forward_axis_sign != 1.0 && self.forward_axis_sign != -1.0 {
            return bad("forward_axis_sign must be +1 or -1");
        }
        if !(self.longitudinal_slack >= 0.0) {
            return bad("longitudinal_slack must be non-negative");
        }
        Ok(())
    }
}

/// Gate for pairing `current` (scan t) with `previous` (scan t−1).
pub fn policy(current: &RadarPoint, previous: &RadarPoint, params: &PolicyParams) -> bool {
    let d = current.position - previous.position;
    if d.norm_squared() > params.max_value {
        return false;
    }
    if params.forward_axis_sign * d.x < -params.longitudinal_slack {
        return false;
    }
    if d.y * d.y > params.max_lateral {
        return false;
    }
    current.intensity >= params.min_intensity && previous.intensity >= params.min_intensity
}

/// Scores `D[i][j]` for current point `i` and previous point `j`.
pub fn similarity_matrix(current: &RadarScan, previous: &RadarScan, params: &PolicyParams) -> DMatrix<f64> {
    similarity_matrix_with(current, previous, params, Exec::default())
}

pub fn similarity_matrix_with(
    current: &RadarScan,
    previous: &RadarScan,
    params: &PolicyParams,
    exec: Exec,
) -> DMatrix<f64> {
    let (n, m) = (current.points.len(), previous.points.len());
    let rows = exec.map_slice(&current.points, |a| {
        previous
            .points
            .iter()
            .map(|b| if policy(a, b, params) { 1.0 / (1.0 + (a.position - b.position).norm_squared()) } else { 0.0 })
            .collect::<Vec<f64>>()
    });
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

/// Minimum-cost assignment covering the smaller dimension.
///
/// Shortest augmenting paths with dual potentials, O(n²m). Rows are inserted
/// in increasing index order and, among equal reduced costs, the lowest
/// column is taken first, so ties resolve deterministically toward low
/// indices. Returns `(row, col)` pairs sorted by row.
pub fn munkres(cost: &DMatrix<f64>) -> Result<Vec<(usize, usize)>, AssociationError> {
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        let rows = cost.nrows();
        return Err(AssociationError::NonFiniteCost(k % rows, k / rows));
    }
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    if n > m {
        let mut t: Vec<(usize, usize)> = solve_rows_le_cols(&cost.transpose()).into_iter().map(|(c, r)| (r, c)).collect();
        t.sort_unstable();
        return Ok(t);
    }
    Ok(solve_rows_le_cols(cost))
}

fn solve_rows_le_cols(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.shape();
    // 1-based with a virtual column 0 holding the row being inserted
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        // flip the augmenting path
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    /// Index into the current scan.
    pub current: usize,
    /// Index into the previous scan.
    pub previous: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn current_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|m| m.current)
    }
}

/// Pairs from a similarity matrix using `params.strategy` and threshold.
pub fn collect_matches(d: &DMatrix<f64>, params: &PolicyParams) -> MatchSet {
    let keep = |s: f64| s > 0.0 && s > params.score_threshold;
    let pairs = match params.strategy {
        MatchStrategy::Munkres => {
            let cost = d.map(|s| 1.0 - s);
            munkres(&cost)
                .expect("scores are finite")
                .into_iter()
                .filter(|&(i, j)| keep(d[(i, j)]))
                .map(|(i, j)| Match { current: i, previous: j, score: d[(i, j)] })
                .collect()
        }
        MatchStrategy::Greedy => {
            let mut candidates: Vec<(usize, usize)> =
                (0..d.nrows()).flat_map(|i| (0..d.ncols()).map(move |j| (i, j))).filter(|&(i, j)| keep(d[(i, j)])).collect();
            candidates.sort_by(|a, b| d[*b].total_cmp(&d[*a]).then(a.cmp(b)));
            let mut row_taken = vec![false; d.nrows()];
            let mut col_taken = vec![false; d.ncols()];
            let mut out = Vec::new();
            for (i, j) in candidates {
                if !row_taken[i] && !col_taken[j] {
                    row_taken[i] = true;
                    col_taken[j] = true;
                    out.push(Match { current: i, previous: j, score: d[(i, j)] });
                }
            }
            out.sort_by_key(|m| m.current);
            out
        }
    };
    MatchSet { pairs }
}

pub fn associate(current: &RadarScan, previous: &RadarScan, params: &PolicyParams) -> MatchSet {
    collect_matches(&similarity_matrix(current, previous, params), params)
}

/// `previous` rotated into the current sensor orientation; `delta` is the
/// sensor rotation from t−1 to t (for example from integrated gyro rates).
pub fn compensate(previous: &RadarScan, delta: &Quaternion) -> RadarScan {
    let inv = delta.conjugate();
    RadarScan { t: previous.t, points: previous.points.iter().map(|p| RadarPoint { position: inv.rotate(&p.position), ..*p }).collect() }
}

/// As [`associate`], against the [`compensate`]d previous scan.
pub fn associate_compensated(
    current: &RadarScan,
    previous: &RadarScan,
    delta: &Quaternion,
    params: &PolicyParams,
) -> MatchSet {
    associate(current, &compensate(previous, delta), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Vec3};
    use crate::radar_sim::{simulate_scan_labeled, Environment, OfficeLayout, PointLabel, RadarConfig};
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64, intensity: f64) -> RadarPoint {
        RadarPoint { position: Vec3::new(x, y, z), intensity, radial_velocity: 0.0 }
    }

    fn scan(points: Vec<RadarPoint>) -> RadarScan {
        RadarScan { t: 0.0, points }
    }

    /// Exhaustive minimum over all injective maps from the smaller side.
    pub(crate) fn brute_force_min(cost: &DMatrix<f64>) -> f64 {
        let (n, m) = cost.shape();
        let (small, large, transposed) = if n <= m { (n, m, false) } else { (m, n, true) };
        let at = |a: usize, b: usize| if transposed { cost[(b, a)] } else { cost[(a, b)] };
        fn rec(k: usize, small: usize, large: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, at: &dyn Fn(usize, usize) -> f64) {
            if k == small {
                *best = best.min(acc);
                return;
            }
            for c in 0..large {
                if !used[c] {
                    used[c] = true;
                    rec(k + 1, small, large, used, acc + at(k, c), best, at);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, small, large, &mut vec![false; large], 0.0, &mut best, &at);
        best
    }

    fn total(cost: &DMatrix<f64>, a: &[(usize, usize)]) -> f64 {
        let mut rows: Vec<_> = a.to_vec();
        rows.sort_unstable();
        if cost.nrows() > cost.ncols() {
            // sum in the order the brute force visits: by column
            rows.sort_unstable_by_key(|&(_, c)| c);
        }
        rows.iter().fold(0.0, |s, &(i, j)| s + cost[(i, j)])
    }

    #[test]
    fn policy_examples() {
        let p = PolicyParams::default();
        let a = pt(3.0, 1.0, 0.0, 10.0);
        assert!(policy(&a, &a, &p));
        let far = PolicyParams { max_value: 0.0625, ..p.clone() };
        assert!(!policy(&pt(3.0, 1.0, 0.0, 10.0), &pt(4.0, 1.0, 0.0, 10.0), &far));
        assert!(!policy(&pt(3.0, 1.0, 0.0, 0.5), &a, &p));
        // a static point moves toward a forward-moving sensor, not away
        assert!(policy(&pt(2.97, 1.0, 0.0, 10.0), &a, &p));
        assert!(!policy(&pt(3.1, 1.0, 0.0, 10.0), &a, &p));
        let flipped = PolicyParams { forward_axis_sign: 1.0, ..p.clone() };
        assert!(policy(&pt(3.1, 1.0, 0.0, 10.0), &a, &flipped));
        assert!(!policy(&pt(3.0, 1.15, 0.0, 10.0), &a, &p));
    }

    #[test]
    fn similarity_examples() {
        let p = PolicyParams { max_value: 4.0, max_lateral: 4.0, longitudinal_slack: 2.0, ..Default::default() };
        let cur = scan(vec![pt(1.0, 0.0, 0.0, 5.0), pt(1.0, 1.0, 0.0, 5.0), pt(9.0, 9.0, 0.0, 5.0)]);
        let prev = scan(vec![pt(1.0, 0.0, 0.0, 5.0)]);
        let d = similarity_matrix(&cur, &prev, &p);
        assert_eq!(d.shape(), (3, 1));
        assert_eq!(d[(0, 0)], 1.0);
        assert_eq!(d[(1, 0)], 0.5);
        assert_eq!(d[(2, 0)], 0.0);
        let seq = similarity_matrix_with(&cur, &prev, &p, Exec::Sequential);
        assert_eq!(seq, d);
    }

    #[test]
    fn munkres_examples() {
        let mut c = DMatrix::from_element(3, 3, 1.0);
        c.fill_diagonal(0.0);
        assert_eq!(munkres(&c).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = munkres(&c).unwrap();
        assert_eq!(a, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(total(&c, &a), 5.0);
        assert!(munkres(&DMatrix::<f64>::zeros(0, 4)).unwrap().is_empty());
        assert!(matches!(munkres(&DMatrix::from_element(2, 2, f64::NAN)), Err(AssociationError::NonFiniteCost(0, 0))));
    }

    #[test]
    fn munkres_ties_prefer_low_indices() {
        let c = DMatrix::from_element(3, 3, 0.0);
        assert_eq!(munkres(&c).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        let c = DMatrix::from_element(2, 4, 1.0);
        assert_eq!(munkres(&c).unwrap(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn munkres_rectangular_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let c = DMatrix::from_fn(n, m, |_, _| rng.gen_range(0..20) as f64);
            let a = munkres(&c).unwrap();
            assert_eq!(a.len(), n.min(m));
            let mut rows: Vec<_> = a.iter().map(|x| x.0).collect();
            let mut cols: Vec<_> = a.iter().map(|x| x.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), a.len());
            assert_eq!(cols.len(), a.len());
            assert_eq!(total(&c, &a), brute_force_min(&c), "{c}");
        }
    }

    #[test]
    fn identical_scans_match_themselves() {
        let pts: Vec<_> = (0..10).map(|i| pt(2.0 + i as f64, (i as f64 * 0.7).sin(), 0.0, 10.0)).collect();
        let s = scan(pts);
        let params = PolicyParams { score_threshold: 0.5, ..Default::default() };
        let m = associate(&s, &s, &params);
        assert_eq!(m.len(), 10);
        assert!(m.pairs.iter().all(|p| p.current == p.previous && p.score == 1.0));
        let greedy = associate(&s, &s, &PolicyParams { strategy: MatchStrategy::Greedy, ..params });
        assert_eq!(greedy, m);
    }

    #[test]
    fn disjoint_scans_match_nothing() {
        let a = scan(vec![pt(1.0, 0.0, 0.0, 10.0), pt(2.0, 0.0, 0.0, 10.0)]);
        let b = scan(vec![pt(10.0, 5.0, 0.0, 10.0), pt(12.0, -5.0, 0.0, 10.0)]);
        assert!(associate(&a, &b, &PolicyParams::default()).is_empty());
    }

    #[test]
    fn compensated_association_undoes_rotation() {
        let prev: Vec<_> = (0..8).map(|i| pt(3.0 + i as f64, 1.0 - 0.3 * i as f64, 0.0, 10.0)).collect();
        let delta = Quaternion::from_yaw(0.05);
        let cur: Vec<_> = prev.iter().map(|p| RadarPoint { position: delta.conjugate().rotate(&p.position), ..*p }).collect();
        let params = PolicyParams::default();
        assert!(associate(&scan(cur.clone()), &scan(prev.clone()), &params).len() < 8);
        assert_eq!(associate_compensated(&scan(cur), &scan(prev), &delta, &params).len(), 8);
    }

    /// Recall of true landmark pairs and the number of matches touching a ghost.
    fn simulated_pair_stats(seed: u64) -> (usize, usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = [Vec3::zeros(), Vec3::new(8.0, 3.0, 0.0)];
        let env = Environment::office(&OfficeLayout::around(&path), seed);
        let cfg = RadarConfig::default();
        let yaw = rng.gen_range(-3.0..3.0);
        let prev_pose = Pose::planar(rng.gen_range(0.0..8.0), rng.gen_range(0.0..3.0), yaw);
        let step = rng.gen_range(0.0..0.03);
        let cur_pose = prev_pose.compose(&Pose::planar(step, 0.0, 0.0));
        let vel = prev_pose.orientation.rotate(&Vec3::new(step * 20.0, 0.0, 0.0));
        let (s0, l0) = simulate_scan_labeled(&env, &prev_pose, &vel, &cfg, rng.gen(), 0.0);
        let (s1, l1) = simulate_scan_labeled(&env, &cur_pose, &vel, &cfg, rng.gen(), 0.05);
        let m = associate(&s1, &s0, &PolicyParams::default());
        let truth: Vec<(usize, usize)> = l1
            .iter()
            .enumerate()
            .filter_map(|(i, a)| match a {
                PointLabel::Landmark(id) => l0.iter().position(|b| *b == PointLabel::Landmark(*id)).map(|j| (i, j)),
                _ => None,
            })
            .collect();
        let hits = m.pairs.iter().filter(|p| truth.contains(&(p.current, p.previous))).count();
        let ghosts = m.pairs.iter().filter(|p| l1[p.current].is_ghost() || l0[p.previous].is_ghost()).count();
        (hits, truth.len(), ghosts)
    }

    #[test]
    fn simulated_scans_recall_true_pairs_without_ghosts() {
        let (mut hits, mut total, mut ghosts) = (0, 0, 0);
        for seed in 0..40 {
            let (h, t, g) = simulated_pair_stats(seed);
            hits += h;
            total += t;
            ghosts += g;
        }
        assert!(hits as f64 >= 0.95 * total as f64, "recall {hits}/{total}");
        assert_eq!(ghosts, 0);
    }

    proptest! {
        #[test]
        fn munkres_matches_brute_force(n in 1usize..=6, m in 1usize..=6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let a = munkres(&c).unwrap();
            prop_assert!((total(&c, &a) - brute_force_min(&c)).abs() <= 1e-12);
        }

        #[test]
        fn association_is_one_to_one_and_scale_invariant(seed in any::<u64>(), k in 1.0..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev: Vec<_> = (0..30).map(|_| pt(rng.gen_range(0.5..6.0), rng.gen_range(-2.0..2.0), 0.0, rng.gen_range(1.0..50.0))).collect();
            let cur: Vec<_> = prev.iter().map(|p| pt(p.position.x - rng.gen_range(0.0..0.05), p.position.y + rng.gen_range(-0.05..0.05), 0.0, p.intensity)).collect();
            let params = PolicyParams { score_threshold: 0.5, ..Default::default() };
            let m = associate(&scan(cur.clone()), &scan(prev.clone()), &params);
            let mut a: Vec<_> = m.pairs.iter().map(|p| p.current).collect();
            let mut b: Vec<_> = m.pairs.iter().map(|p| p.previous).collect();
            a.sort_unstable(); a.dedup(); b.sort_unstable(); b.dedup();
            prop_assert_eq!(a.len(), m.len());
            prop_assert_eq!(b.len(), m.len());
            prop_assert!(m.pairs.iter().all(|p| p.score > params.score_threshold));
            let scale = |v: &[RadarPoint]| v.iter().map(|p| RadarPoint { intensity: p.intensity * k, ..*p }).collect::<Vec<_>>();
            let scaled = associate(&scan(scale(&cur)), &scan(scale(&prev)), &params);
            prop_assert_eq!(scaled, m);
        }

        #[test]
        fn shuffling_preserves_match_set(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev: Vec<_> = (0..20).map(|_| pt(rng.gen_range(0.5..6.0), rng.gen_range(-2.0..2.0), rng.gen_range(-0.3..0.3), 10.0)).collect();
            let cur: Vec<_> = prev.iter().map(|p| pt(p.position.x - 0.02, p.position.y + 0.01, p.position.z, 10.0)).collect();
            let params = PolicyParams::default();
            let base = associate(&scan(cur.clone()), &scan(prev.clone()), &params);
            let mut perm: Vec<usize> = (0..cur.len()).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<_> = perm.iter().map(|&i| cur[i]).collect();
            let m = associate(&scan(shuffled), &scan(prev), &params);
            let mut a: Vec<_> = base.pairs.iter().map(|p| (p.current, p.previous)).collect();
            let mut b: Vec<_> = m.pairs.iter().map(|p| (perm[p.current], p.previous)).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
