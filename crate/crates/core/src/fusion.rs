//! Audio/visual cross-attention, the shared-space projections, and the
//! decoder/reconstructor heads used by the losses.

use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::nn::{self, BnState, ForwardCtx, Rng};
use crate::params::{ParamGroup, ParamId, ParamStore, ParamVars};
use crate::qdma::{fold_tokens, unfold_tokens};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Tokens each hidden vector is folded into for cross-attention.
    pub tokens: usize,
    pub heads: usize,
    /// Dropout after each projection.
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { tokens: 8, heads: 1, dropout: 0.1 }
    }
}

impl FusionConfig {
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.tokens == 0 || !hidden.is_multiple_of(self.tokens) {
            return Err(DaanError::Config(format!(
                "hidden dim {hidden} must be divisible by fusion tokens ({})",
                self.tokens
            )));
        }
        let tok = hidden / self.tokens;
        if self.heads == 0 || !tok.is_multiple_of(self.heads) {
            return Err(DaanError::Config(format!(
                "fusion.heads ({}) must divide the token width {tok}",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DaanError::Config(format!("fusion.dropout must lie in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Which input a projection or decoder belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Audio,
    Visual,
    Text,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Audio, Stream::Visual, Stream::Text];

    fn index(self) -> usize {
        self as usize
    }

    fn name(self) -> &'static str {
        match self {
            Stream::Audio => "audio",
            Stream::Visual => "visual",
            Stream::Text => "text",
        }
    }
}

/// One direction of the cross-attention: queries from its own modality,
/// keys/values from the other.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossBranch {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), ParamGroup::Shared, nn::glorot(rng, &[fan_in, fan_out], fan_in, fan_out)),
            b: store.add(format!("{name}.b"), ParamGroup::Shared, nn::zeros(fan_out)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        nn::linear(tape, x, pv.get(self.w), pv.get(self.b))
    }
}

/// Linear -> batch-norm -> ReLU -> dropout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection {
    pub linear: Linear,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_slot: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionParams {
    /// Indexed audio, visual.
    pub cross: [CrossBranch; 2],
    pub text_hidden: Linear,
    /// Indexed by [`Stream`].
    pub proj: [Projection; 3],
    pub decoders: [Linear; 3],
    /// Indexed audio, visual.
    pub reconstructors: [Linear; 2],
}

impl FusionParams {
    /// `bn_slots` hands out batch-norm state indices.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        hidden: usize,
        output: usize,
        text_dim: usize,
        cfg: &FusionConfig,
        bn_slots: &mut impl FnMut() -> usize,
    ) -> Self {
        let tok = hidden / cfg.tokens;
        let ff = 2 * tok;
        let g = ParamGroup::Shared;
        let mut branch = |store: &mut ParamStore, who: &str| {
            let n = |s: &str| format!("cross.{who}.{s}");
            CrossBranch {
                wq: store.add(n("wq"), g, nn::glorot(rng, &[tok, tok], tok, tok)),
                wk: store.add(n("wk"), g, nn::glorot(rng, &[tok, tok], tok, tok)),
                wv: store.add(n("wv"), g, nn::glorot(rng, &[tok, tok], tok, tok)),
                wo: store.add(n("wo"), g, nn::glorot(rng, &[tok, tok], tok, tok)),
                ff_w1: store.add(n("ff_w1"), g, nn::glorot(rng, &[tok, ff], tok, ff)),
                ff_b1: store.add(n("ff_b1"), g, nn::zeros(ff)),
                ff_w2: store.add(n("ff_w2"), g, nn::glorot(rng, &[ff, tok], ff, tok)),
                ff_b2: store.add(n("ff_b2"), g, nn::zeros(tok)),
                ln_gamma: store.add(n("ln_gamma"), g, nn::ones(tok)),
                ln_beta: store.add(n("ln_beta"), g, nn::zeros(tok)),
            }
        };
        let cross = [branch(store, "audio"), branch(store, "visual")];
        let text_hidden = Linear::init(store, rng, "text_hidden", text_dim, hidden);
        let mut projection = |store: &mut ParamStore, s: Stream| Projection {
            linear: Linear::init(store, rng, &format!("proj.{}", s.name()), hidden, output),
            bn_gamma: store.add(format!("proj.{}.bn_gamma", s.name()), g, nn::ones(output)),
            bn_beta: store.add(format!("proj.{}.bn_beta", s.name()), g, nn::zeros(output)),
            bn_slot: bn_slots(),
        };
        let proj = [
            projection(store, Stream::Audio),
            projection(store, Stream::Visual),
            projection(store, Stream::Text),
        ];
        let decoders = Stream::ALL.map(|s| Linear::init(store, rng, &format!("decoder.{}", s.name()), output, text_dim));
        let reconstructors = [
            Linear::init(store, rng, "reconstructor.audio", output, hidden),
            Linear::init(store, rng, "reconstructor.visual", output, hidden),
        ];
        FusionParams { cross, text_hidden, proj, decoders, reconstructors }
    }

    pub fn projection(&self, s: Stream) -> &Projection {
        &self.proj[s.index()]
    }

    pub fn decoder(&self, s: Stream) -> Linear {
        self.decoders[s.index()]
    }
}

/// Cross-attention for one branch on folded tokens; returns `T x tok`.
pub fn cross_branch(
    tape: &mut Tape,
    pv: &ParamVars,
    b: &CrossBranch,
    own: Var,
    other: Var,
    heads: usize,
) -> Result<Var> {
    if tape.value(own).shape() != tape.value(other).shape() {
        return Err(DaanError::Dimension {
            op: "cross_attention",
            lhs: tape.value(own).shape().to_vec(),
            rhs: tape.value(other).shape().to_vec(),
        });
    }
    let q = tape.matmul(own, pv.get(b.wq))?;
    let k = tape.matmul(other, pv.get(b.wk))?;
    let v = tape.matmul(other, pv.get(b.wv))?;
    let attended = if heads == 1 {
        nn::attention(tape, q, k, v)?
    } else {
        let width = tape.value(q).cols() / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * width, width)?;
            let kh = tape.slice_cols(k, h * width, width)?;
            let vh = tape.slice_cols(v, h * width, width)?;
            outs.push(nn::attention(tape, qh, kh, vh)?);
        }
        tape.concat_cols(&outs)?
    };
    let mixed = tape.matmul(attended, pv.get(b.wo))?;
    let h = nn::linear(tape, mixed, pv.get(b.ff_w1), pv.get(b.ff_b1))?;
    let h = tape.relu(h)?;
    let f = nn::linear(tape, h, pv.get(b.ff_w2), pv.get(b.ff_b2))?;
    let res = tape.add(own, f)?;
    nn::layer_norm(tape, res, pv.get(b.ln_gamma), pv.get(b.ln_beta))
}

/// Exchange information between the two hidden rows; returns
/// `(phi_a_crs, phi_v_crs)` as `1 x hidden` rows.
pub fn cross_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    fp: &FusionParams,
    cfg: &FusionConfig,
    phi_a: Var,
    phi_v: Var,
) -> Result<(Var, Var)> {
    if tape.value(phi_a).shape() != tape.value(phi_v).shape() {
        return Err(DaanError::Dimension {
            op: "cross_attention",
            lhs: tape.value(phi_a).shape().to_vec(),
            rhs: tape.value(phi_v).shape().to_vec(),
        });
    }
    let a = fold_tokens(tape, phi_a, cfg.tokens)?;
    let v = fold_tokens(tape, phi_v, cfg.tokens)?;
    let a_crs = cross_branch(tape, pv, &fp.cross[0], a, v, cfg.heads)?;
    let v_crs = cross_branch(tape, pv, &fp.cross[1], v, a, cfg.heads)?;
    Ok((unfold_tokens(tape, a_crs)?, unfold_tokens(tape, v_crs)?))
}

/// Project a batch of hidden rows of one stream into the shared output space.
pub fn project(
    tape: &mut Tape,
    pv: &ParamVars,
    proj: &Projection,
    dropout: f64,
    xs: &[Var],
    bn: &BnState,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Vec<Var>> {
    let pre = xs
        .iter()
        .map(|&x| proj.linear.apply(tape, pv, x))
        .collect::<Result<Vec<_>>>()?;
    let normed = nn::batch_norm(tape, &pre, pv.get(proj.bn_gamma), pv.get(proj.bn_beta), bn, proj.bn_slot, ctx)?;
    normed
        .into_iter()
        .map(|x| {
            let x = tape.relu(x)?;
            nn::dropout(tape, x, dropout, ctx)
        })
        .collect()
}
