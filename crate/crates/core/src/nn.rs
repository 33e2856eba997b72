//! Layer building blocks shared by the network modules.

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub type Rng = ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        BnState { mean: vec![0.0; features], var: vec![1.0; features] }
    }
}

/// Per-forward context: mode, dropout randomness, pending batch-norm updates.
pub struct ForwardCtx<'r> {
    pub mode: Mode,
    rng: Option<&'r mut Rng>,
    bn_updates: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl<'r> ForwardCtx<'r> {
    pub fn train(rng: &'r mut Rng) -> Self {
        ForwardCtx { mode: Mode::Train, rng: Some(rng), bn_updates: Vec::new() }
    }

    pub fn eval() -> Self {
        ForwardCtx { mode: Mode::Eval, rng: None, bn_updates: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Batch statistics gathered in training mode, as `(slot, mean, unbiased var)`.
    pub fn take_bn_updates(&mut self) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Fold new batch statistics into running estimates.
pub fn commit_bn(states: &mut [BnState], updates: Vec<(usize, Vec<f64>, Vec<f64>)>) {
    for (slot, mean, var) in updates {
        let s = &mut states[slot];
        for j in 0..mean.len() {
            s.mean[j] = (1.0 - BN_MOMENTUM) * s.mean[j] + BN_MOMENTUM * mean[j];
            s.var[j] = (1.0 - BN_MOMENTUM) * s.var[j] + BN_MOMENTUM * var[j];
        }
    }
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Batch normalization across every row of every input.
///
/// In training mode the batch mean/variance normalize the inputs and are
/// treated as constants by the backward pass, so each row's gradient only
/// depends on that row. Eval mode uses the running statistics.
pub fn batch_norm(
    tape: &mut Tape,
    xs: &[Var],
    gamma: Var,
    beta: Var,
    state: &BnState,
    slot: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    let features = state.mean.len();
    let (mean, inv_std) = match ctx.mode {
        Mode::Eval => (
            state.mean.clone(),
            state.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<_>>(),
        ),
        Mode::Train => {
            let mut mean = vec![0.0; features];
            let mut n = 0usize;
            for &x in xs {
                let t = tape.value(x);
                if t.cols() != features {
                    return Err(DaanError::Dimension {
                        op: "batch_norm",
                        lhs: t.shape().to_vec(),
                        rhs: vec![features],
                    });
                }
                for r in 0..t.rows() {
                    for j in 0..features {
                        mean[j] += t.at(r, j);
                    }
                    n += 1;
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            let mut var = vec![0.0; features];
            for &x in xs {
                let t = tape.value(x);
                for r in 0..t.rows() {
                    for j in 0..features {
                        let d = t.at(r, j) - mean[j];
                        var[j] += d * d;
                    }
                }
            }
            let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
            let unbiased: Vec<f64> =
                var.iter().map(|v| if n > 1 { v / (n - 1) as f64 } else { *v }).collect();
            ctx.bn_updates.push((slot, mean.clone(), unbiased));
            (mean, biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect())
        }
    };
    xs.iter()
        .map(|&x| {
            let n = tape.normalize_cols(x, &mean, &inv_std)?;
            let s = tape.mul_row(n, gamma)?;
            tape.add_row(s, beta)
        })
        .collect()
}

/// Inverted dropout; identity in eval mode or at rate 0.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    if ctx.mode == Mode::Eval || rate <= 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_deref_mut()
        .ok_or_else(|| DaanError::Contract("training-mode dropout needs an rng".into()))?;
    let keep = 1.0 - rate;
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, mask)
}

/// Row-wise layer normalization with affine scale/shift.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.normalize_rows(x, NORM_EPS)?;
    let s = tape.mul_row(n, gamma)?;
    tape.add_row(s, beta)
}

/// `softmax(q k^T / sqrt(d)) v`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = attention_scores(tape, q, k)?;
    tape.matmul(s, v)
}

/// `softmax(q k^T / sqrt(d))`.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d = tape.value(q).cols() as f64;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / d.sqrt())?;
    tape.softmax_rows(scaled)
}

/// Glorot-uniform initialization.
pub fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

pub fn ones(n: usize) -> Tensor {
    Tensor::filled(&[n], 1.0)
}

pub fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}
