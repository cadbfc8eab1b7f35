use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

use super::ut::{condition_covariance, sigma_points, weighted_cross, weighted_mean, UtParams};
use super::{integrate_gyro, FusionError, PoseMeasurement};
use crate::geometry::{Pose, Quaternion, Vec3};
use crate::motion_model::{imu_window, MotionModel, PreparedMotion};
use crate::radar_sim::ImuSample;

/// `[p (3), q (4), v (3), gyro bias (3)]`.
pub const STATE_DIM: usize = 13;
const P: usize = 0;
const Q: usize = 3;
const V: usize = 7;
const B: usize = 10;

pub type Covariance = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Additive process noise densities; the variance added per prediction is
/// `sigma² · dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessNoise {
    /// m/√s
    pub position: f64,
    /// per quaternion component, 1/√s
    pub orientation: f64,
    /// m/s/√s
    pub velocity: f64,
    /// rad/s/√s; zero keeps the bias constant, positive values make it a random walk
    pub gyro_bias: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self { position: 0.001, orientation: 0.005, velocity: 0.1, gyro_bias: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialUncertainty {
    pub position: f64,
    pub orientation: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self { position: 0.01, orientation: 0.01, velocity: 0.1, gyro_bias: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UkfConfig {
    pub ut: UtParams,
    pub process: ProcessNoise,
    pub initial: InitialUncertainty,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UkfState {
    pub position: Vec3,
    pub orientation: Quaternion,
    pub velocity: Vec3,
    pub gyro_bias: Vec3,
    pub covariance: Covariance,
}

impl UkfState {
    pub fn new(pose: &Pose, velocity: Vec3, initial: &InitialUncertainty) -> Self {
        let mut covariance = Covariance::zeros();
        let sigmas = [(P, 3, initial.position), (Q, 4, initial.orientation), (V, 3, initial.velocity), (B, 3, initial.gyro_bias)];
        for (start, len, s) in sigmas {
            for i in start..start + len {
                covariance[(i, i)] = s * s;
            }
        }
        Self { position: pose.position, orientation: pose.orientation.canonical(), velocity, gyro_bias: Vec3::zeros(), covariance }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.position, self.orientation)
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let q = self.orientation;
        let mut x = DVector::zeros(STATE_DIM);
        x.fixed_rows_mut::<3>(P).copy_from(&self.position);
        x.fixed_rows_mut::<4>(Q).copy_from_slice(&[q.w, q.x, q.y, q.z]);
        x.fixed_rows_mut::<3>(V).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(B).copy_from(&self.gyro_bias);
        x
    }

    /// Rebuilds a state from a recombined mean, renormalizing the quaternion
    /// and keeping `w >= 0`. A sign flip negates the quaternion rows and
    /// columns of the covariance so both stay consistent.
    fn from_parts(x: &DVector<f64>, cov: DMatrix<f64>) -> Result<Self, FusionError> {
        let q = Quaternion::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3])
            .normalize_raw()
            .map_err(|_| FusionError::InvalidInput("quaternion collapsed to zero".into()))?;
        let mut cov = cov;
        let q = if q.w < 0.0 {
            for i in Q..Q + 4 {
                cov.row_mut(i).neg_mut();
                cov.column_mut(i).neg_mut();
            }
            -q
        } else {
            q
        };
        condition_covariance(&mut cov);
        if x.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(FusionError::InvalidInput("filter state became non-finite".into()));
        }
        Ok(Self {
            position: x.fixed_rows::<3>(P).into(),
            orientation: q,
            velocity: x.fixed_rows::<3>(V).into(),
            gyro_bias: x.fixed_rows::<3>(B).into(),
            covariance: Covariance::from_iterator(cov.iter().cloned()),
        })
    }

    fn covariance_dynamic(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(STATE_DIM, STATE_DIM, self.covariance.iter().cloned())
    }
}

fn unit(x: &DVector<f64>) -> Quaternion {
    let q = Quaternion::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3]);
    let n = q.norm();
    if n > 0.0 {
        q.scale(1.0 / n)
    } else {
        Quaternion::IDENTITY
    }
}

/// Propagates the state over one frame. `imu` holds the samples of the
/// frame interval; each sigma point integrates them with its own bias, then
/// moves by the motion model's displacement at its own orientation and
/// velocity. Velocity and bias are carried over unchanged.
pub fn ukf_predict(state: &UkfState, imu: &[ImuSample], model: &MotionModel, dt: f64, config: &UkfConfig) -> Result<UkfState, FusionError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(FusionError::InvalidInput(format!("frame interval must be positive, got {dt}")));
    }
    let prepared = match model {
        MotionModel::ConstantVelocity => PreparedMotion::ConstantVelocity,
        MotionModel::Lstm(_) => {
            let Some(last) = imu.last() else {
                return Err(FusionError::InvalidInput("the learned motion model needs IMU samples".into()));
            };
            model.prepare(&imu_window(imu, last.t, model.window()), &state.gyro_bias)?
        }
    };
    let sp = sigma_points(&state.to_vector(), &state.covariance_dynamic(), &config.ut)?;
    let propagated: Vec<DVector<f64>> = sp
        .points
        .iter()
        .map(|x| {
            let raw = Quaternion::new(x[Q], x[Q + 1], x[Q + 2], x[Q + 3]);
            let v: Vec3 = x.fixed_rows::<3>(V).into();
            let b: Vec3 = x.fixed_rows::<3>(B).into();
            let d = prepared.displacement(&unit(x), &v, dt);
            let q = raw.multiply(&integrate_gyro(imu, &b, dt));
            let mut y = x.clone();
            y.fixed_rows_mut::<3>(P).zip_apply(&d, |a, b| *a += b);
            y.fixed_rows_mut::<4>(Q).copy_from_slice(&[q.w, q.x, q.y, q.z]);
            y
        })
        .collect();
    let mean = weighted_mean(&propagated, &sp.weights.mean);
    let mut cov = weighted_cross(&propagated, &mean, &propagated, &mean, &sp.weights.covariance);
    let n = config.process;
    for (start, len, s) in [(P, 3, n.position), (Q, 4, n.orientation), (V, 3, n.velocity), (B, 3, n.gyro_bias)] {
        for i in start..start + len {
            cov[(i, i)] += s * s * dt;
        }
    }
    UkfState::from_parts(&mean, cov)
}

/// Pseudo-inverse of a symmetric matrix; eigenvalues below a relative
/// threshold are treated as zero. Errors if the matrix is clearly indefinite.
fn symmetric_pinv(s: &DMatrix<f64>) -> Result<DMatrix<f64>, FusionError> {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.min();
    if !min.is_finite() || min < -1e-12 * max.max(1.0) {
        return Err(FusionError::InnovationNotPsd(min));
    }
    let tol = 1e-12 * max;
    let inv = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
}

/// Kalman update with `h(x) = [p, q]`. The measured quaternion is taken on
/// the same side of the double cover as the prediction.
pub fn ukf_correct(state: &UkfState, z: &PoseMeasurement, config: &UkfConfig) -> Result<UkfState, FusionError> {
    z.validate()?;
    let sp = sigma_points(&state.to_vector(), &state.covariance_dynamic(), &config.ut)?;
    let obs: Vec<DVector<f64>> = sp.points.iter().map(|x| x.rows(0, 7).into_owned()).collect();
    let z_hat = weighted_mean(&obs, &sp.weights.mean);
    let mut s = weighted_cross(&obs, &z_hat, &obs, &z_hat, &sp.weights.covariance);
    s += DMatrix::from_iterator(7, 7, z.noise7(&state.orientation).iter().cloned());
    let s = (&s + s.transpose()) * 0.5;
    let x_mean = weighted_mean(&sp.points, &sp.weights.mean);
    let pxz = weighted_cross(&sp.points, &x_mean, &obs, &z_hat, &sp.weights.covariance);

    let mut qz = z.pose.orientation;
    if qz.dot(&state.orientation) < 0.0 {
        qz = -qz;
    }
    let p = z.pose.position;
    let zv = DVector::from_vec(vec![p.x, p.y, p.z, qz.w, qz.x, qz.y, qz.z]);
    let gain = &pxz * symmetric_pinv(&s)?;
    let x = x_mean + &gain * (zv - z_hat);
    let cov = state.covariance_dynamic() - &gain * &s * gain.transpose();
    UkfState::from_parts(&x, cov)
}
