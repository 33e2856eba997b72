//! Quality-discrepancy mitigation attention.
//!
//! Each modality vector is folded into `T` tokens. The token columns are split
//! into two halves, each half gets its own query/key projection, and the two
//! softmax score maps are combined as `S1 - beta * S2` before weighting the
//! values. Subtracting a second, independently parameterized score map cancels
//! attention mass that both paths agree on, leaving a sparser map. A group-norm
//! + linear/batch-norm refinement then maps the attended tokens to `hidden`.

use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::nn::{self, BnState, ForwardCtx, Rng};
use crate::params::{Modality, ParamGroup, ParamId, ParamStore, ParamVars, QdmaPart};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdmaConfig {
    /// Weight of the subtracted score map, in `[0, 1]`.
    pub beta: f64,
    /// Number of tokens each modality vector is folded into.
    pub tokens: usize,
    /// Group-norm group count over the `hidden` channels.
    pub groups: usize,
    pub dropout: f64,
}

impl Default for QdmaConfig {
    fn default() -> Self {
        QdmaConfig { beta: 0.5, tokens: 8, groups: 4, dropout: 0.1 }
    }
}

impl QdmaConfig {
    pub fn validate(&self, input: usize, hidden: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(DaanError::Config(format!("qdma.beta must lie in [0,1], got {}", self.beta)));
        }
        if self.tokens == 0 || !input.is_multiple_of(2 * self.tokens) {
            return Err(DaanError::Config(format!(
                "input dim {input} must be divisible by 2 * qdma.tokens ({})",
                2 * self.tokens
            )));
        }
        if !hidden.is_multiple_of(self.tokens) {
            return Err(DaanError::Config(format!(
                "hidden dim {hidden} must be divisible by qdma.tokens ({})",
                self.tokens
            )));
        }
        if self.groups == 0 || !hidden.is_multiple_of(self.groups) {
            return Err(DaanError::Config(format!(
                "qdma.groups ({}) must divide hidden dim {hidden}",
                self.groups
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DaanError::Config(format!("qdma.dropout must lie in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Tape handles of the five attention projections.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq1: Var,
    pub wk1: Var,
    pub wq2: Var,
    pub wk2: Var,
    pub wv: Var,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QdmaParams {
    pub wq1: ParamId,
    pub wk1: ParamId,
    pub wq2: ParamId,
    pub wk2: ParamId,
    pub wv: ParamId,
    pub gn_scale: ParamId,
    pub gn_shift: ParamId,
    pub lin_w: ParamId,
    pub lin_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_slot: usize,
}

impl QdmaParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        modality: Modality,
        input: usize,
        hidden: usize,
        cfg: &QdmaConfig,
        bn_slot: usize,
    ) -> Self {
        let group = ParamGroup::qdma(modality, QdmaPart::Attn);
        let tok = input / cfg.tokens;
        let half = tok / 2;
        let att = hidden / cfg.tokens;
        let name = |s: &str| format!("qdma.{modality}.{s}");
        let mut mat = |store: &mut ParamStore, s: &str, r: usize, c: usize| {
            store.add(name(s), group, nn::glorot(rng, &[r, c], r, c))
        };
        let wq1 = mat(store, "wq1", half, att);
        let wk1 = mat(store, "wk1", half, att);
        let wq2 = mat(store, "wq2", half, att);
        let wk2 = mat(store, "wk2", half, att);
        let wv = mat(store, "wv", tok, att);
        let lin_w = mat(store, "lin_w", hidden, hidden);
        QdmaParams {
            wq1,
            wk1,
            wq2,
            wk2,
            wv,
            gn_scale: store.add(name("gn_scale"), group, nn::ones(hidden)),
            gn_shift: store.add(name("gn_shift"), group, nn::zeros(hidden)),
            lin_w,
            lin_b: store.add(name("lin_b"), group, nn::zeros(hidden)),
            bn_gamma: store.add(name("bn_gamma"), group, nn::ones(hidden)),
            bn_beta: store.add(name("bn_beta"), group, nn::zeros(hidden)),
            bn_slot,
        }
    }

    pub fn attn_weights(&self, pv: &ParamVars) -> AttnWeights {
        AttnWeights {
            wq1: pv.get(self.wq1),
            wk1: pv.get(self.wk1),
            wq2: pv.get(self.wq2),
            wk2: pv.get(self.wk2),
            wv: pv.get(self.wv),
        }
    }
}

/// `1 x d` row to `T x d/T` tokens.
pub fn fold_tokens(tape: &mut Tape, x: Var, tokens: usize) -> Result<Var> {
    let n = tape.value(x).len();
    if tokens == 0 || !n.is_multiple_of(tokens) {
        return Err(DaanError::Shape(format!("cannot fold {n} features into {tokens} tokens")));
    }
    tape.reshape(x, &[tokens, n / tokens])
}

/// Tokens back to a `1 x d` row.
pub fn unfold_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).len();
    tape.reshape(x, &[1, n])
}

/// `softmax(Q1 K1^T / sqrt d) - beta * softmax(Q2 K2^T / sqrt d)` where path
/// `p` projects column half `p` of the tokens.
pub fn differential_scores(tape: &mut Tape, tokens: Var, w: &AttnWeights, beta: f64) -> Result<Var> {
    let d_tok = tape.value(tokens).cols();
    if !d_tok.is_multiple_of(2) {
        return Err(DaanError::Shape(format!("token dim {d_tok} cannot be split into two halves")));
    }
    let half = d_tok / 2;
    let h1 = tape.slice_cols(tokens, 0, half)?;
    let h2 = tape.slice_cols(tokens, half, half)?;
    let q1 = tape.matmul(h1, w.wq1)?;
    let k1 = tape.matmul(h1, w.wk1)?;
    let q2 = tape.matmul(h2, w.wq2)?;
    let k2 = tape.matmul(h2, w.wk2)?;
    let s1 = nn::attention_scores(tape, q1, k1)?;
    let s2 = nn::attention_scores(tape, q2, k2)?;
    let s2 = tape.scale(s2, beta)?;
    tape.sub(s1, s2)
}

/// Differential scores applied to `values * W_V`.
pub fn differential_attention(
    tape: &mut Tape,
    tokens: Var,
    values: Var,
    w: &AttnWeights,
    beta: f64,
) -> Result<Var> {
    let (t, t_v) = (tape.value(tokens).rows(), tape.value(values).rows());
    if t != t_v {
        return Err(DaanError::Shape(format!("value tokens ({t_v}) must match query tokens ({t})")));
    }
    let scores = differential_scores(tape, tokens, w, beta)?;
    let v = tape.matmul(values, w.wv)?;
    tape.matmul(scores, v)
}

/// Group norm followed by the linear map, i.e. everything before the
/// batch-norm of the refinement layer.
pub fn refine_pre_norm(tape: &mut Tape, pv: &ParamVars, p: &QdmaParams, o1: Var, groups: usize) -> Result<Var> {
    let n = tape.value(o1).len();
    if groups == 0 || !n.is_multiple_of(groups) {
        return Err(DaanError::Config(format!("group count {groups} does not divide {n} channels")));
    }
    let g = tape.reshape(o1, &[groups, n / groups])?;
    let g = tape.normalize_rows(g, nn::NORM_EPS)?;
    let g = tape.reshape(g, &[1, n])?;
    let g = tape.mul_row(g, pv.get(p.gn_scale))?;
    let o2 = tape.add_row(g, pv.get(p.gn_shift))?;
    nn::linear(tape, o2, pv.get(p.lin_w), pv.get(p.lin_b))
}

/// Batch-norm, ReLU, dropout and the `(1 - beta)` scale, over a batch.
pub fn refine_post_norm(
    tape: &mut Tape,
    pv: &ParamVars,
    p: &QdmaParams,
    cfg: &QdmaConfig,
    pre: &[Var],
    bn: &BnState,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    let normed = nn::batch_norm(tape, pre, pv.get(p.bn_gamma), pv.get(p.bn_beta), bn, p.bn_slot, ctx)?;
    normed
        .into_iter()
        .map(|x| {
            let x = tape.relu(x)?;
            let x = nn::dropout(tape, x, cfg.dropout, ctx)?;
            tape.scale(x, 1.0 - cfg.beta)
        })
        .collect()
}

/// Refinement of a batch of attention outputs `o1` to `hidden` rows.
pub fn refinement(
    tape: &mut Tape,
    pv: &ParamVars,
    p: &QdmaParams,
    cfg: &QdmaConfig,
    o1: &[Var],
    bn: &BnState,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    let pre = o1
        .iter()
        .map(|&o| refine_pre_norm(tape, pv, p, o, cfg.groups))
        .collect::<Result<Vec<_>>>()?;
    refine_post_norm(tape, pv, p, cfg, &pre, bn, ctx)
}

/// Fold, differential attention and refinement for a batch of `1 x input`
/// modality rows; returns `1 x hidden` rows (`o3`).
pub fn qdma_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    p: &QdmaParams,
    cfg: &QdmaConfig,
    features: &[Var],
    bn: &BnState,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    let w = p.attn_weights(pv);
    let o1 = features
        .iter()
        .map(|&x| {
            let tokens = fold_tokens(tape, x, cfg.tokens)?;
            differential_attention(tape, tokens, tokens, &w, cfg.beta)
        })
        .collect::<Result<Vec<_>>>()?;
    refinement(tape, pv, p, cfg, &o1, bn, ctx)
}
