use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::{Pose, Quaternion, Timestamped, Trajectory, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Line,
    Arc,
    InfinityLoop,
    Mixed,
    SharpTurns,
    /// Alternating straights and turns drawn from `params.seed`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryParams {
    /// Speed oscillates sinusoidally between these bounds (m/s).
    pub min_speed: f64,
    pub max_speed: f64,
    /// Period of the speed oscillation (s).
    pub speed_period: f64,
    /// Sample rate of the returned poses (Hz).
    pub rate: f64,
    /// Path length for `line`, `mixed`, `sharp_turns` and `random` (m).
    pub length: f64,
    /// Turn radius for `arc` and `infinity_loop` (m).
    pub radius: f64,
    /// Signed turn angle for `arc` (rad, positive = left).
    pub arc_angle: f64,
    pub start: Pose,
    /// Seed for `random` paths.
    pub seed: u64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            min_speed: 0.4,
            max_speed: 0.6,
            speed_period: 8.0,
            rate: 20.0,
            length: 10.23,
            radius: 1.0,
            arc_angle: PI / 2.0,
            start: Pose::IDENTITY,
            seed: 0,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Configuration(m.to_string()));
        if !(self.min_speed > 0.0 && self.max_speed >= self.min_speed && self.max_speed.is_finite()) {
            return bad("speeds must satisfy 0 < min_speed <= max_speed");
        }
        if !(self.speed_period > 0.0 && self.rate > 0.0) {
            return bad("speed_period and rate must be positive");
        }
        if !(self.length > 0.0 && self.radius > 0.0 && self.length.is_finite()) {
            return bad("length and radius must be positive");
        }
        if !(self.arc_angle.is_finite() && self.arc_angle != 0.0) {
            return bad("arc_angle must be non-zero");
        }
        self.start.validate().map_err(|e| SimError::Configuration(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug)]
enum Segment {
    Straight(f64),
    /// Radius and signed swept angle.
    Turn(f64, f64),
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Straight(l) => l,
            Segment::Turn(r, a) => r * a.abs(),
        }
    }

    fn scaled(&self, k: f64) -> Segment {
        match *self {
            Segment::Straight(l) => Segment::Straight(l * k),
            Segment::Turn(r, a) => Segment::Turn(r * k, a),
        }
    }

    /// Planar pose `(x, y, yaw)` after travelling `s` along the segment.
    fn advance(&self, (x, y, yaw): (f64, f64, f64), s: f64) -> (f64, f64, f64) {
        match *self {
            Segment::Straight(_) => (x + s * yaw.cos(), y + s * yaw.sin(), yaw),
            Segment::Turn(r, a) => {
                let sign = a.signum();
                let phi = sign * s / r;
                let end = yaw + phi;
                (x + sign * r * (end.sin() - yaw.sin()), y - sign * r * (end.cos() - yaw.cos()), end)
            }
        }
    }
}

fn segments(kind: TrajectoryKind, p: &TrajectoryParams) -> Vec<Segment> {
    use Segment::*;
    let scale_to = |template: Vec<Segment>| {
        let total: f64 = template.iter().map(Segment::length).sum();
        template.iter().map(|s| s.scaled(p.length / total)).collect()
    };
    match kind {
        TrajectoryKind::Line => vec![Straight(p.length)],
        TrajectoryKind::Arc => vec![Turn(p.radius, p.arc_angle)],
        TrajectoryKind::InfinityLoop => vec![Turn(p.radius, 2.0 * PI), Turn(p.radius, -2.0 * PI)],
        TrajectoryKind::Mixed => scale_to(vec![
            Straight(2.0),
            Turn(1.0, PI / 2.0),
            Straight(1.5),
            Turn(0.8, -PI / 2.0),
            Straight(1.0),
            Turn(0.6, PI),
            Straight(1.0),
        ]),
        TrajectoryKind::SharpTurns => scale_to(vec![
            Straight(1.5),
            Turn(0.3, PI / 2.0),
            Straight(1.2),
            Turn(0.3, -PI / 2.0),
            Straight(1.2),
            Turn(0.35, -2.0 * PI / 3.0),
            Straight(1.2),
            Turn(0.3, PI / 2.0),
            Straight(1.5),
            Turn(0.3, 5.0 * PI / 6.0),
            Straight(1.5),
        ]),
        TrajectoryKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            let mut template = Vec::new();
            let mut total = 0.0;
            while total < p.length {
                let straight = Straight(rng.gen_range(0.5..2.0));
                let angle = rng.gen_range(0.4..2.6) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let turn = Turn(rng.gen_range(0.3..1.5), angle);
                total += straight.length() + turn.length();
                template.push(straight);
                template.push(turn);
            }
            scale_to(template)
        }
    }
}

/// Speed profile `mid + amp·sin(2πt/P)` and its closed-form integral.
struct SpeedProfile {
    mid: f64,
    amp: f64,
    period: f64,
}

impl SpeedProfile {
    fn distance(&self, t: f64) -> f64 {
        let w = 2.0 * PI / self.period;
        self.mid * t + self.amp / w * (1.0 - (w * t).cos())
    }

    /// Time at which `distance` reaches `s` (monotone since speed > 0).
    fn time_at(&self, s: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, s / (self.mid - self.amp));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.distance(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Total length of the path the given kind traces (m).
pub fn path_length_of(kind: TrajectoryKind, params: &TrajectoryParams) -> f64 {
    segments(kind, params).iter().map(Segment::length).sum()
}

/// Summed distance between consecutive positions.
pub fn path_length(traj: &[Timestamped<Pose>]) -> f64 {
    traj.windows(2).map(|w| (w[1].value.position - w[0].value.position).norm()).sum()
}

/// Planar ground-truth trajectory sampled at `params.rate`, ending with a pose
/// at the exact end of the path.
pub fn generate_trajectory(kind: TrajectoryKind, params: &TrajectoryParams) -> Result<Trajectory, SimError> {
    params.validate()?;
    let segs = segments(kind, params);
    let total: f64 = segs.iter().map(Segment::length).sum();
    let profile = SpeedProfile {
        mid: 0.5 * (params.min_speed + params.max_speed),
        amp: 0.5 * (params.max_speed - params.min_speed),
        period: params.speed_period,
    };
    let duration = if profile.amp == 0.0 { total / profile.mid } else { profile.time_at(total) };

    // planar state at each segment start
    let mut starts = Vec::with_capacity(segs.len());
    let mut state = (0.0, 0.0, 0.0);
    let mut offset = 0.0;
    for seg in &segs {
        starts.push((offset, state));
        state = seg.advance(state, seg.length());
        offset += seg.length();
    }
    let planar_at = |s: f64| {
        let s = s.clamp(0.0, total);
        let idx = starts.iter().rposition(|(o, _)| *o <= s).unwrap_or(0);
        let (o, st) = starts[idx];
        segs[idx].advance(st, (s - o).min(segs[idx].length()))
    };
    let pose_at = |t: f64| {
        let s = if t >= duration { total } else { profile.distance(t) };
        let (x, y, yaw) = planar_at(s);
        params.start.compose(&Pose::planar(x, y, yaw))
    };

    let dt = 1.0 / params.rate;
    let n = (duration / dt).floor() as usize;
    let mut out: Trajectory = (0..=n).map(|k| k as f64 * dt).map(|t| Timestamped::new(t, pose_at(t))).collect();
    if duration - n as f64 * dt > 1e-9 {
        out.push(Timestamped::new(duration, pose_at(duration)));
    }
    Ok(out)
}

/// Pose at time `t` by linear/spherical interpolation, clamped to the ends.
pub fn interpolate_pose(traj: &[Timestamped<Pose>], t: f64) -> Pose {
    let Some(first) = traj.first() else { return Pose::IDENTITY };
    if t <= first.t {
        return first.value;
    }
    let last = traj.last().unwrap();
    if t >= last.t {
        return last.value;
    }
    let i = traj.partition_point(|s| s.t <= t);
    let (a, b) = (&traj[i - 1], &traj[i]);
    let s = (t - a.t) / (b.t - a.t);
    let position = a.value.position + (b.value.position - a.value.position) * s;
    let orientation = a.value.orientation.slerp(&b.value.orientation, s).normalize().unwrap_or(Quaternion::IDENTITY);
    Pose::new(position, orientation)
}

/// World-frame velocity by central difference over `h` seconds.
pub fn velocity_at(traj: &[Timestamped<Pose>], t: f64, h: f64) -> Vec3 {
    let (t0, t1) = match (traj.first(), traj.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Vec3::zeros(),
    };
    let lo = (t - h).max(t0);
    let hi = (t + h).min(t1);
    if hi <= lo {
        return Vec3::zeros();
    }
    (interpolate_pose(traj, hi).position - interpolate_pose(traj, lo).position) / (hi - lo)
}
