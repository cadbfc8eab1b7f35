//! Scaled unscented transform.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::FusionError;

/// Jitter added to the diagonal when a factorization fails.
const CHOLESKY_JITTER: f64 = 1e-12;
const CHOLESKY_RETRIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 2.0, kappa: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtWeights {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
}

impl UtParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    /// Weights for `2n + 1` points. The central mean weight is computed as
    /// the complement of the others so the mean weights sum to one.
    pub fn weights(&self, n: usize) -> Result<UtWeights, FusionError> {
        let c = n as f64 + self.lambda(n);
        if !(c > 0.0) || !c.is_finite() || !self.beta.is_finite() {
            return Err(FusionError::InvalidInput(format!("unscented spread n + lambda = {c} must be positive")));
        }
        let wi = 0.5 / c;
        let w0 = 1.0 - 2.0 * n as f64 * wi;
        let mut mean = vec![wi; 2 * n + 1];
        mean[0] = w0;
        let mut covariance = mean.clone();
        covariance[0] = w0 + 1.0 - self.alpha * self.alpha + self.beta;
        Ok(UtWeights { mean, covariance })
    }
}

/// Lower-triangular `L` with `L Lᵀ = m` for positive semi-definite `m`;
/// columns with a (numerically) zero pivot are left zero. `None` if a pivot
/// is clearly negative.
pub fn semidefinite_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-13 * scale;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if !d.is_finite() || d < -tol {
            return None;
        }
        if d <= tol {
            continue;
        }
        let r = d.sqrt();
        l[(j, j)] = r;
        for i in j + 1..n {
            let s = m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / r;
        }
    }
    Some(l)
}

fn factor_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>, FusionError> {
    let mut a = m.clone();
    for attempt in 0..=CHOLESKY_RETRIES {
        if let Some(l) = semidefinite_cholesky(&a) {
            return Ok(l);
        }
        if attempt < CHOLESKY_RETRIES {
            for i in 0..a.nrows() {
                a[(i, i)] += CHOLESKY_JITTER;
            }
        }
    }
    Err(FusionError::DegenerateCovariance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub weights: UtWeights,
}

/// `mean`, then `mean ± column_i(√((n + λ) cov))`.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>, ut: &UtParams) -> Result<SigmaPoints, FusionError> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(FusionError::InvalidInput(format!("covariance is {}x{}, state has {n} entries", cov.nrows(), cov.ncols())));
    }
    let weights = ut.weights(n)?;
    let c = n as f64 + ut.lambda(n);
    let l = factor_with_jitter(&(cov * c))?;
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(mean.clone());
    for i in 0..n {
        points.push(mean + l.column(i));
    }
    for i in 0..n {
        points.push(mean - l.column(i));
    }
    Ok(SigmaPoints { points, weights })
}

pub fn weighted_mean(points: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let mut m = DVector::zeros(points[0].len());
    for (p, w) in points.iter().zip(weights) {
        m.axpy(*w, p, 1.0);
    }
    m
}

/// `Σ wᵢ (aᵢ − ā)(bᵢ − b̄)ᵀ`.
pub fn weighted_cross(a: &[DVector<f64>], a_mean: &DVector<f64>, b: &[DVector<f64>], b_mean: &DVector<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((x, y), w) in a.iter().zip(b).zip(weights) {
        let dx = x - a_mean;
        let dy = y - b_mean;
        c.ger(*w, &dx, &dy, 1.0);
    }
    c
}

impl SigmaPoints {
    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.points, &self.weights.mean)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        weighted_cross(&self.points, &m, &self.points, &m, &self.weights.covariance)
    }

    /// Mean and covariance of `f` applied to every point.
    pub fn transform<F: Fn(&DVector<f64>) -> DVector<f64>>(&self, f: F) -> (DVector<f64>, DMatrix<f64>) {
        let ys: Vec<_> = self.points.iter().map(f).collect();
        let m = weighted_mean(&ys, &self.weights.mean);
        let c = weighted_cross(&ys, &m, &ys, &m, &self.weights.covariance);
        (m, c)
    }
}

/// Symmetrizes `m` and clamps negative eigenvalues to zero.
pub fn condition_covariance(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    let t = r.transpose();
    *m = (&r + t) * 0.5;
}
