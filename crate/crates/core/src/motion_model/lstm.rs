//! Bi-directional LSTM over a window of 6-channel IMU samples, projected to a
//! 3-vector. Parameters live in one flat buffer so optimizers and gradient
//! checks can treat them uniformly.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::MotionError;

pub const INPUT_DIM: usize = 6;
pub const OUTPUT_DIM: usize = 3;

/// Flat parameter layout, per direction (forward then backward):
/// `W` (4H×6, row-major), `U` (4H×H), `b` (4H); then the output projection
/// `V` (3×2H) and `c` (3). Gate blocks are ordered input, forget, cell,
/// output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub dropout_rate: f64,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Layout {
    h: usize,
}

impl Layout {
    fn dir_len(self) -> usize {
        4 * self.h * (INPUT_DIM + self.h + 1)
    }
    fn dir(self, d: usize) -> usize {
        d * self.dir_len()
    }
    fn w(self, d: usize) -> usize {
        self.dir(d)
    }
    fn u(self, d: usize) -> usize {
        self.dir(d) + 4 * self.h * INPUT_DIM
    }
    fn b(self, d: usize) -> usize {
        self.u(d) + 4 * self.h * self.h
    }
    fn v(self) -> usize {
        2 * self.dir_len()
    }
    fn c(self) -> usize {
        self.v() + OUTPUT_DIM * 2 * self.h
    }
    fn total(self) -> usize {
        self.c() + OUTPUT_DIM
    }
}

pub fn parameter_count(hidden: usize) -> usize {
    Layout { h: hidden }.total()
}

impl LstmParams {
    pub fn zeros(hidden: usize, dropout_rate: f64) -> Self {
        Self { hidden, dropout_rate, data: vec![0.0; parameter_count(hidden)] }
    }

    /// Uniform in `±1/√H` with forget-gate biases set to 1.
    pub fn init(hidden: usize, dropout_rate: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(hidden, dropout_rate);
        let a = 1.0 / (hidden as f64).sqrt();
        for v in p.data.iter_mut() {
            *v = rng.gen_range(-a..a);
        }
        let l = Layout { h: hidden };
        for d in 0..2 {
            let b = l.b(d);
            p.data[b..b + 4 * hidden].fill(0.0);
            p.data[b + hidden..b + 2 * hidden].fill(1.0);
        }
        p
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if self.hidden == 0 {
            return Err(MotionError::Shape("hidden size must be positive".into()));
        }
        if self.data.len() != parameter_count(self.hidden) {
            return Err(MotionError::Shape(format!(
                "expected {} parameters for H = {}, found {}",
                parameter_count(self.hidden),
                self.hidden,
                self.data.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(MotionError::Shape("dropout rate must lie in [0, 1)".into()));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(MotionError::Shape("non-finite parameter".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations of one direction.
struct DirCache {
    /// Gates `[i, f, g, o]` per step, 4H each.
    gates: Vec<f64>,
    /// Cell state per step (H each), with the zero initial state first.
    cells: Vec<f64>,
    /// Hidden state per step (H each), with the zero initial state first.
    hiddens: Vec<f64>,
}

fn run_direction(p: &[f64], l: Layout, d: usize, seq: &[[f64; INPUT_DIM]], reverse: bool) -> DirCache {
    let h = l.h;
    let n = seq.len();
    let (w, u, b) = (&p[l.w(d)..l.u(d)], &p[l.u(d)..l.b(d)], &p[l.b(d)..l.b(d) + 4 * h]);
    let mut cache = DirCache { gates: vec![0.0; 4 * h * n], cells: vec![0.0; h * (n + 1)], hiddens: vec![0.0; h * (n + 1)] };
    let mut z = vec![0.0; 4 * h];
    for step in 0..n {
        let x = &seq[if reverse { n - 1 - step } else { step }];
        let h_prev = &cache.hiddens[step * h..(step + 1) * h];
        for r in 0..4 * h {
            let wr = &w[r * INPUT_DIM..(r + 1) * INPUT_DIM];
            let ur = &u[r * h..(r + 1) * h];
            let mut acc = b[r];
            for k in 0..INPUT_DIM {
                acc += wr[k] * x[k];
            }
            for k in 0..h {
                acc += ur[k] * h_prev[k];
            }
            z[r] = acc;
        }
        let g_out = &mut cache.gates[step * 4 * h..(step + 1) * 4 * h];
        for k in 0..h {
            g_out[k] = sigmoid(z[k]);
            g_out[h + k] = sigmoid(z[h + k]);
            g_out[2 * h + k] = z[2 * h + k].tanh();
            g_out[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        for k in 0..h {
            let c_prev = cache.cells[step * h + k];
            let c = g_out[h + k] * c_prev + g_out[k] * g_out[2 * h + k];
            cache.cells[(step + 1) * h + k] = c;
            cache.hiddens[(step + 1) * h + k] = g_out[3 * h + k] * c.tanh();
        }
    }
    cache
}

/// Backpropagates `dh_final` through one direction, accumulating into `grad`.
fn backprop_direction(
    p: &[f64],
    l: Layout,
    d: usize,
    seq: &[[f64; INPUT_DIM]],
    reverse: bool,
    cache: &DirCache,
    dh_final: &[f64],
    grad: &mut [f64],
) {
    let h = l.h;
    let n = seq.len();
    let u = &p[l.u(d)..l.b(d)];
    let mut dh = dh_final.to_vec();
    let mut dc = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for step in (0..n).rev() {
        let x = &seq[if reverse { n - 1 - step } else { step }];
        let gates = &cache.gates[step * 4 * h..(step + 1) * 4 * h];
        for k in 0..h {
            let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
            let c = cache.cells[(step + 1) * h + k];
            let c_prev = cache.cells[step * h + k];
            let tc = c.tanh();
            let d_o = dh[k] * tc;
            dc[k] += dh[k] * o * (1.0 - tc * tc);
            dz[k] = dc[k] * g * i * (1.0 - i);
            dz[h + k] = dc[k] * c_prev * f * (1.0 - f);
            dz[2 * h + k] = dc[k] * i * (1.0 - g * g);
            dz[3 * h + k] = d_o * o * (1.0 - o);
            dc[k] *= f;
        }
        let h_prev = &cache.hiddens[step * h..(step + 1) * h];
        let (gw, rest) = grad[l.w(d)..].split_at_mut(4 * h * INPUT_DIM);
        let (gu, rest) = rest.split_at_mut(4 * h * h);
        let gb = &mut rest[..4 * h];
        for r in 0..4 * h {
            let z = dz[r];
            if z == 0.0 {
                continue;
            }
            for k in 0..INPUT_DIM {
                gw[r * INPUT_DIM + k] += z * x[k];
            }
            for k in 0..h {
                gu[r * h + k] += z * h_prev[k];
            }
            gb[r] += z;
        }
        for k in 0..h {
            dh[k] = 0.0;
        }
        for r in 0..4 * h {
            let z = dz[r];
            if z == 0.0 {
                continue;
            }
            let ur = &u[r * h..(r + 1) * h];
            for k in 0..h {
                dh[k] += ur[k] * z;
            }
        }
    }
}

/// Inverted-dropout keep mask over the concatenated final hidden state.
pub fn dropout_mask(params: &LstmParams, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 - params.dropout_rate;
    (0..2 * params.hidden).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
}

struct Forward {
    fwd: DirCache,
    bwd: DirCache,
    /// Concatenated final hidden state after the dropout mask.
    features: Vec<f64>,
    output: [f64; OUTPUT_DIM],
}

fn forward_full(params: &LstmParams, seq: &[[f64; INPUT_DIM]], mask: Option<&[f64]>) -> Result<Forward, MotionError> {
    params.validate()?;
    if seq.is_empty() {
        return Err(MotionError::Shape("input sequence is empty".into()));
    }
    let l = Layout { h: params.hidden };
    let h = l.h;
    if let Some(m) = mask {
        if m.len() != 2 * h {
            return Err(MotionError::Shape("dropout mask length must be 2H".into()));
        }
    }
    let p = &params.data;
    let fwd = run_direction(p, l, 0, seq, false);
    let bwd = run_direction(p, l, 1, seq, true);
    let n = seq.len();
    let mut features = Vec::with_capacity(2 * h);
    features.extend_from_slice(&fwd.hiddens[n * h..]);
    features.extend_from_slice(&bwd.hiddens[n * h..]);
    if let Some(m) = mask {
        for (f, k) in features.iter_mut().zip(m) {
            *f *= k;
        }
    }
    let v = &p[l.v()..l.c()];
    let c = &p[l.c()..];
    let mut output = [0.0; OUTPUT_DIM];
    for (r, out) in output.iter_mut().enumerate() {
        *out = c[r] + v[r * 2 * h..(r + 1) * 2 * h].iter().zip(&features).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(Forward { fwd, bwd, features, output })
}

/// Network output for a normalized sequence. Dropout is applied only when
/// `dropout` supplies a random source (training mode).
pub fn lstm_forward(
    params: &LstmParams,
    sequence: &[[f64; INPUT_DIM]],
    dropout: Option<&mut dyn RngCore>,
) -> Result<[f64; OUTPUT_DIM], MotionError> {
    let mask = dropout.map(|rng| dropout_mask(params, rng));
    Ok(forward_full(params, sequence, mask.as_deref())?.output)
}

/// Loss `weight · ½‖y − target‖²` and its gradient with respect to every
/// parameter, by backpropagation through time. `mask` fixes the dropout
/// pattern so the loss is a deterministic function of the parameters.
pub fn lstm_backward(
    params: &LstmParams,
    sequence: &[[f64; INPUT_DIM]],
    target: &[f64; OUTPUT_DIM],
    weight: f64,
    mask: Option<&[f64]>,
) -> Result<(f64, Vec<f64>), MotionError> {
    let fw = forward_full(params, sequence, mask)?;
    let l = Layout { h: params.hidden };
    let h = l.h;
    let mut grad = vec![0.0; l.total()];
    let mut dy = [0.0; OUTPUT_DIM];
    let mut loss = 0.0;
    for r in 0..OUTPUT_DIM {
        let e = fw.output[r] - target[r];
        loss += 0.5 * e * e;
        dy[r] = weight * e;
    }
    let v = &params.data[l.v()..l.c()];
    let mut dfeat = vec![0.0; 2 * h];
    for r in 0..OUTPUT_DIM {
        for k in 0..2 * h {
            grad[l.v() + r * 2 * h + k] = dy[r] * fw.features[k];
            dfeat[k] += v[r * 2 * h + k] * dy[r];
        }
        grad[l.c() + r] = dy[r];
    }
    if let Some(m) = mask {
        for (d, k) in dfeat.iter_mut().zip(m) {
            *d *= k;
        }
    }
    backprop_direction(&params.data, l, 0, sequence, false, &fw.fwd, &dfeat[..h], &mut grad);
    backprop_direction(&params.data, l, 1, sequence, true, &fw.bwd, &dfeat[h..], &mut grad);
    Ok((weight * loss, grad))
}
