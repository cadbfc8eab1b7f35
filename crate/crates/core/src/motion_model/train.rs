//! Training data extraction and minibatch Adam training for the LSTM model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{dropout_mask, lstm_backward, lstm_forward, LstmParams, INPUT_DIM, OUTPUT_DIM};
use super::{imu_channels, imu_window, LstmModel, MotionError, Normalization, MODEL_FORMAT, MODEL_VERSION};
use crate::exec::Exec;
use crate::geometry::{Pose, Timestamped, Vec3};
use crate::radar_sim::{
    generate_trajectory, interpolate_pose, simulate_imu, velocity_at, ImuErrorModel, ImuSample, TrajectoryKind, TrajectoryParams,
};

/// Forward speeds below this give ill-conditioned targets and are skipped.
const MIN_TRAINING_SPEED: f64 = 0.05;

/// IMU windows paired with body-frame unit displacements.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingSet {
    pub window: usize,
    /// Raw (unnormalized) channels per window.
    pub inputs: Vec<Vec<[f64; INPUT_DIM]>>,
    pub targets: Vec<[f64; OUTPUT_DIM]>,
    /// Source trajectory of each sample; train and validation never share one.
    pub trajectory_ids: Vec<usize>,
}

/// Body-frame displacement from `a` to `b` divided by forward travel
/// `speed · dt`.
pub fn unit_displacement_target(a: &Pose, b: &Pose, speed: f64, dt: f64) -> Vec3 {
    a.orientation.conjugate().rotate(&(b.position - a.position)) / (speed * dt)
}

impl TrainingSet {
    pub fn new(window: usize) -> Self {
        Self { window, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Adds one sample per radar frame of a ground-truth trajectory and its
    /// IMU stream (assumed free of gyro bias).
    pub fn add_sequence(&mut self, id: usize, truth: &[Timestamped<Pose>], imu: &[ImuSample], frame_rate: f64) {
        let (Some(first), Some(last)) = (truth.first(), truth.last()) else { return };
        let dt = 1.0 / frame_rate;
        let mut k = 1;
        loop {
            let t1 = first.t + k as f64 * dt;
            if t1 > last.t + 1e-9 {
                break;
            }
            k += 1;
            let t0 = t1 - dt;
            let (a, b) = (interpolate_pose(truth, t0), interpolate_pose(truth, t1));
            let speed = velocity_at(truth, t0, 1e-3).dot(&a.orientation.rotate(&Vec3::x()));
            if speed < MIN_TRAINING_SPEED {
                continue;
            }
            let window = imu_window(imu, t1, self.window);
            if window.len() != self.window {
                continue;
            }
            let u = unit_displacement_target(&a, &b, speed, dt);
            self.inputs.push(window.iter().map(|s| imu_channels(s, &Vec3::zeros())).collect());
            self.targets.push([u.x, u.y, u.z]);
            self.trajectory_ids.push(id);
        }
    }

    /// Sample indices of (train, validation): the last
    /// `ceil(fraction · ids)` trajectory ids are held out, at least one
    /// remains for training.
    pub fn split(&self, validation_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut ids = self.trajectory_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        let held = ((validation_fraction * ids.len() as f64).ceil() as usize).min(ids.len().saturating_sub(1));
        let cut = ids.len() - held;
        let validation_ids = &ids[cut..];
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, id) in self.trajectory_ids.iter().enumerate() {
            if validation_ids.contains(id) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

/// Random training paths with simulated IMU streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub trajectories: usize,
    pub length: f64,
    pub seed: u64,
    pub imu_rate: f64,
    pub frame_rate: f64,
    pub window: usize,
    /// Gyro bias is zeroed (the filter feeds bias-corrected rates); the
    /// accelerometer bias is drawn per trajectory within `±accel_bias_spread`.
    pub imu_errors: ImuErrorModel,
    pub accel_bias_spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            trajectories: 24,
            length: 8.0,
            seed: 7,
            imu_rate: 400.0,
            frame_rate: 20.0,
            window: 20,
            imu_errors: ImuErrorModel::default(),
            accel_bias_spread: 0.03,
        }
    }
}

pub fn synthetic_training_set(spec: &SyntheticSpec) -> Result<TrainingSet, MotionError> {
    let mut set = TrainingSet::new(spec.window);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for id in 0..spec.trajectories {
        let params = TrajectoryParams {
            rate: spec.imu_rate,
            length: spec.length,
            seed: rng.gen(),
            speed_period: rng.gen_range(5.0..12.0),
            ..Default::default()
        };
        let truth = generate_trajectory(TrajectoryKind::Random, &params).map_err(|e| MotionError::Data(e.to_string()))?;
        let s = spec.accel_bias_spread;
        let errors = ImuErrorModel {
            gyro_bias: Vec3::zeros(),
            accel_bias: Vec3::new(rng.gen_range(-s..=s), rng.gen_range(-s..=s), 0.0),
            ..spec.imu_errors
        };
        let imu = simulate_imu(&truth, spec.imu_rate, &errors, rng.gen()).map_err(|e| MotionError::Data(e.to_string()))?;
        set.add_sequence(id, &truth, &imu, spec.frame_rate);
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub hidden: usize,
    pub window: usize,
    pub dropout: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 15,
            batch: 32,
            clip: 1.0,
            hidden: 32,
            window: 20,
            dropout: 0.1,
            validation_fraction: 0.25,
            seed: 1,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * grad[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn normalized(set: &TrainingSet, idx: &[usize], input: &Normalization, target: &Normalization) -> Vec<(Vec<[f64; INPUT_DIM]>, [f64; OUTPUT_DIM])> {
    idx.iter()
        .map(|&i| {
            let seq = set.inputs[i]
                .iter()
                .map(|x| {
                    let mut y = [0.0; INPUT_DIM];
                    input.apply(x, &mut y);
                    y
                })
                .collect();
            let mut t = [0.0; OUTPUT_DIM];
            target.apply(&set.targets[i], &mut t);
            (seq, t)
        })
        .collect()
}

/// Mean `½‖y − t‖²` over normalized samples, inference mode.
fn mean_loss(params: &LstmParams, data: &[(Vec<[f64; INPUT_DIM]>, [f64; OUTPUT_DIM])], exec: Exec) -> Result<f64, MotionError> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = exec.map_slice(data, |(seq, t)| {
        lstm_forward(params, seq, None).map(|y| (0..OUTPUT_DIM).map(|k| 0.5 * (y[k] - t[k]).powi(2)).sum::<f64>())
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// Minibatch Adam with gradient-norm clipping. Per-sample gradients may be
/// computed in parallel; they are summed in sample order, so the result is
/// identical for a given seed regardless of `exec`.
pub fn train(set: &TrainingSet, hyper: &TrainHyper, exec: Exec) -> Result<LstmModel, MotionError> {
    if set.is_empty() {
        return Err(MotionError::Data("training set is empty".into()));
    }
    if set.window != hyper.window {
        return Err(MotionError::Shape(format!("training windows have {} samples, hyperparameters say {}", set.window, hyper.window)));
    }
    if hyper.batch == 0 || hyper.hidden == 0 || !(hyper.learning_rate > 0.0) || !(hyper.clip > 0.0) {
        return Err(MotionError::Training("batch, hidden, learning_rate and clip must be positive".into()));
    }
    let (train_idx, val_idx) = set.split(hyper.validation_fraction);
    let input_norm = Normalization::fit_grouped(
        train_idx.iter().flat_map(|&i| set.inputs[i].iter().map(|x| x.as_slice())),
        INPUT_DIM,
        &[0..3, 3..6],
    );
    let target_norm = Normalization::fit_grouped(train_idx.iter().map(|&i| set.targets[i].as_slice()), OUTPUT_DIM, &[0..OUTPUT_DIM]);
    let train_data = normalized(set, &train_idx, &input_norm, &target_norm);
    let val_data = normalized(set, &val_idx, &input_norm, &target_norm);

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = LstmParams::init(hyper.hidden, hyper.dropout, &mut rng);
    let mut adam = Adam::new(params.data.len());
    let mut train_loss = Vec::with_capacity(hyper.epochs);
    let mut validation_loss = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            let masks: Vec<Vec<f64>> = batch.iter().map(|_| dropout_mask(&params, &mut rng)).collect();
            let weight = 1.0 / batch.len() as f64;
            let results = exec.map_range(batch.len(), |b| {
                let (seq, t) = &train_data[batch[b]];
                lstm_backward(&params, seq, t, weight, Some(&masks[b]))
            });
            let mut grad = vec![0.0; params.data.len()];
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss / weight;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(MotionError::Training(format!("non-finite gradient in epoch {epoch}")));
            }
            if norm > hyper.clip {
                let k = hyper.clip / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
            adam.step(&mut params.data, &grad, hyper.learning_rate);
        }
        let tl = epoch_loss / train_data.len() as f64;
        let vl = mean_loss(&params, &val_data, exec)?;
        if !tl.is_finite() || !(vl.is_finite() || val_data.is_empty()) {
            return Err(MotionError::Training(format!("loss diverged in epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: train {tl:.5} validation {vl:.5}");
        train_loss.push(tl);
        validation_loss.push(vl);
    }

    let model = LstmModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        hidden: hyper.hidden,
        window: hyper.window,
        input_norm,
        target_norm,
        params,
        train_loss,
        validation_loss,
    };
    model.validate()?;
    Ok(model)
}

/// RMSE (metres) of one-frame displacement predictions against ground truth
/// when the model is fed true orientation and velocity.
pub fn displacement_rmse(
    model: &super::MotionModel,
    truth: &[Timestamped<Pose>],
    imu: &[ImuSample],
    frame_rate: f64,
) -> Result<f64, MotionError> {
    let (Some(first), Some(last)) = (truth.first(), truth.last()) else {
        return Err(MotionError::Data("empty trajectory".into()));
    };
    let dt = 1.0 / frame_rate;
    let (mut sum, mut n) = (0.0, 0usize);
    let mut k = 1;
    while first.t + k as f64 * dt <= last.t + 1e-9 {
        let t1 = first.t + k as f64 * dt;
        k += 1;
        let t0 = t1 - dt;
        let (a, b) = (interpolate_pose(truth, t0), interpolate_pose(truth, t1));
        let v = velocity_at(truth, t0, 1e-3);
        let prepared = model.prepare(&imu_window(imu, t1, model.window()), &Vec3::zeros())?;
        let d = prepared.displacement(&a.orientation, &v, dt);
        sum += (d - (b.position - a.position)).norm_squared();
        n += 1;
    }
    if n == 0 {
        return Err(MotionError::Data("trajectory shorter than one frame".into()));
    }
    Ok((sum / n as f64).sqrt())
}
