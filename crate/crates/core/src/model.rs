//! The assembled network: per-modality encoders, cross-attention fusion,
//! projections and heads.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::fusion::{self, FusionConfig, FusionParams, Linear, Stream};
use crate::losses::LossInputs;
use crate::nn::{self, BnState, ForwardCtx, Rng};
use crate::params::{Modality, ParamGroup, ParamStore, ParamVars};
use crate::qdma::{self, QdmaConfig, QdmaParams};
use crate::tcn::{self, TcnConfig, TcnParams};
use crate::tensor::{Tape, Tensor, Var};

/// What turns a raw modality feature into its hidden representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// Differential attention, refinement and temporal bypass.
    Qdma,
    /// Two-layer MLP sized to match the QDMA parameter count (ablation base).
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub text_dim: usize,
    pub encoder: EncoderKind,
    pub qdma: QdmaConfig,
    pub tcn: TcnConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: 64,
            hidden: 64,
            output: 32,
            text_dim: 32,
            encoder: EncoderKind::Qdma,
            qdma: QdmaConfig::default(),
            tcn: TcnConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.output == 0 || self.text_dim == 0 {
            return Err(DaanError::Config("all dims must be positive".into()));
        }
        if self.output != self.text_dim {
            return Err(DaanError::Config(format!(
                "output dim {} must equal the text embedding dim {}",
                self.output, self.text_dim
            )));
        }
        self.qdma.validate(self.input, self.hidden)?;
        self.tcn.validate(self.hidden)?;
        self.fusion.validate(self.hidden)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EncoderParams {
    Qdma { qdma: QdmaParams, tcn: TcnParams },
    Mlp { first: Linear, second: Linear },
}

/// Per-sample audio/visual outputs.
#[derive(Debug, Clone, Copy)]
pub struct AvOutputs {
    pub phi_a: Var,
    pub phi_v: Var,
    pub phi_a_crs: Var,
    pub phi_v_crs: Var,
    pub theta_a: Var,
    pub theta_v: Var,
    pub rho_a: Var,
    pub rho_v: Var,
    pub phi_a_rec: Var,
    pub phi_v_rec: Var,
}

/// Per-class (or per-sample) text outputs.
#[derive(Debug, Clone, Copy)]
pub struct TextOutputs {
    pub phi_w: Var,
    pub theta_w: Var,
    pub rho_w: Var,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DaanModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub bn: Vec<BnState>,
    encoders: [EncoderParams; 2],
    fusion: FusionParams,
}

/// Number of QDMA + TCN scalars for one modality under `cfg`.
pub fn qdma_param_count(cfg: &ModelConfig) -> usize {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed_from_u64(0);
    QdmaParams::init(&mut store, &mut rng, Modality::Audio, cfg.input, cfg.hidden, &cfg.qdma, 0);
    TcnParams::init(&mut store, &mut rng, Modality::Audio, cfg.hidden, &cfg.tcn);
    store.count("")
}

/// Width of the MLP hidden layer whose parameter count best matches QDMA.
pub fn matched_mlp_width(cfg: &ModelConfig) -> usize {
    let target = qdma_param_count(cfg) as f64;
    let per_unit = (cfg.input + 1 + cfg.hidden) as f64;
    (((target - cfg.hidden as f64) / per_unit).round() as usize).max(1)
}

impl DaanModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut encoders = Vec::with_capacity(2);
        for m in Modality::ALL {
            let enc = match cfg.encoder {
                EncoderKind::Qdma => {
                    let slot = bn.len();
                    bn.push(BnState::new(cfg.hidden));
                    let q = QdmaParams::init(&mut params, &mut rng, m, cfg.input, cfg.hidden, &cfg.qdma, slot);
                    let t = TcnParams::init(&mut params, &mut rng, m, cfg.hidden, &cfg.tcn);
                    EncoderParams::Qdma { qdma: q, tcn: t }
                }
                EncoderKind::Mlp => {
                    let width = matched_mlp_width(&cfg);
                    let mut lin = |name: &str, i: usize, o: usize| Linear {
                        w: params.add(format!("mlp.{m}.{name}.w"), ParamGroup::Shared, nn::glorot(&mut rng, &[i, o], i, o)),
                        b: params.add(format!("mlp.{m}.{name}.b"), ParamGroup::Shared, nn::zeros(o)),
                    };
                    let first = lin("first", cfg.input, width);
                    let second = lin("second", width, cfg.hidden);
                    EncoderParams::Mlp { first, second }
                }
            };
            encoders.push(enc);
        }
        let encoders: [EncoderParams; 2] = encoders.try_into().expect("two modalities");
        let mut slots = || {
            bn.push(BnState::new(cfg.output));
            bn.len() - 1
        };
        let fusion = FusionParams::init(&mut params, &mut rng, cfg.hidden, cfg.output, cfg.text_dim, &cfg.fusion, &mut slots);
        Ok(DaanModel { cfg, params, bn, encoders, fusion })
    }

    pub fn fusion_params(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn encoder(&self, m: Modality) -> &EncoderParams {
        &self.encoders[m as usize]
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn commit(&mut self, ctx: &mut ForwardCtx<'_>) {
        nn::commit_bn(&mut self.bn, ctx.take_bn_updates());
    }

    /// Hidden features `phi` for a batch of one modality's `1 x input` rows.
    pub fn encode(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        m: Modality,
        xs: &[Var],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Var>> {
        match self.encoder(m) {
            EncoderParams::Qdma { qdma: q, tcn: t } => {
                let o3 = qdma::qdma_forward(tape, pv, q, &self.cfg.qdma, xs, &self.bn[q.bn_slot], ctx)?;
                let (causal, dilated) = t.vars(pv);
                o3.into_iter()
                    .map(|o| {
                        let y = tcn::tcn_forward(tape, o, causal, &dilated, &self.cfg.tcn)?;
                        tcn::temporal_embed_add(tape, o, y)
                    })
                    .collect()
            }
            EncoderParams::Mlp { first, second } => xs
                .iter()
                .map(|&x| {
                    let h = first.apply(tape, pv, x)?;
                    let h = tape.relu(h)?;
                    second.apply(tape, pv, h)
                })
                .collect(),
        }
    }

    /// Full audio/visual path for a batch (rows are `1 x input`).
    pub fn forward_av(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        audio: &[Var],
        visual: &[Var],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<AvOutputs>> {
        if audio.len() != visual.len() {
            return Err(DaanError::Contract("audio and visual batch sizes differ".into()));
        }
        for &x in audio.iter().chain(visual) {
            if tape.value(x).len() != self.cfg.input {
                return Err(DaanError::Dimension {
                    op: "forward_av",
                    lhs: tape.value(x).shape().to_vec(),
                    rhs: vec![1, self.cfg.input],
                });
            }
        }
        let phi_a = self.encode(tape, pv, Modality::Audio, audio, ctx)?;
        let phi_v = self.encode(tape, pv, Modality::Visual, visual, ctx)?;
        let mut crs_a = Vec::with_capacity(phi_a.len());
        let mut crs_v = Vec::with_capacity(phi_a.len());
        for (&a, &v) in phi_a.iter().zip(&phi_v) {
            let (ca, cv) = fusion::cross_attention(tape, pv, &self.fusion, &self.cfg.fusion, a, v)?;
            crs_a.push(ca);
            crs_v.push(cv);
        }
        let drop = self.cfg.fusion.dropout;
        let pa = self.fusion.projection(Stream::Audio);
        let pvis = self.fusion.projection(Stream::Visual);
        let theta_a = fusion::project(tape, pv, pa, drop, &crs_a, &self.bn[pa.bn_slot], ctx)?;
        let theta_v = fusion::project(tape, pv, pvis, drop, &crs_v, &self.bn[pvis.bn_slot], ctx)?;
        let mut out = Vec::with_capacity(phi_a.len());
        for i in 0..phi_a.len() {
            out.push(AvOutputs {
                phi_a: phi_a[i],
                phi_v: phi_v[i],
                phi_a_crs: crs_a[i],
                phi_v_crs: crs_v[i],
                theta_a: theta_a[i],
                theta_v: theta_v[i],
                rho_a: self.fusion.decoder(Stream::Audio).apply(tape, pv, theta_a[i])?,
                rho_v: self.fusion.decoder(Stream::Visual).apply(tape, pv, theta_v[i])?,
                phi_a_rec: self.fusion.reconstructors[0].apply(tape, pv, theta_a[i])?,
                phi_v_rec: self.fusion.reconstructors[1].apply(tape, pv, theta_v[i])?,
            });
        }
        Ok(out)
    }

    /// Text path for a batch of `1 x text_dim` rows.
    pub fn forward_text(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        texts: &[Var],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<TextOutputs>> {
        let phi_w = texts
            .iter()
            .map(|&w| self.fusion.text_hidden.apply(tape, pv, w))
            .collect::<Result<Vec<_>>>()?;
        let pw = self.fusion.projection(Stream::Text);
        let theta_w = fusion::project(tape, pv, pw, self.cfg.fusion.dropout, &phi_w, &self.bn[pw.bn_slot], ctx)?;
        phi_w
            .iter()
            .zip(&theta_w)
            .map(|(&phi, &theta)| {
                Ok(TextOutputs {
                    phi_w: phi,
                    theta_w: theta,
                    rho_w: self.fusion.decoder(Stream::Text).apply(tape, pv, theta)?,
                })
            })
            .collect()
    }

    /// Eval-mode shared-space embeddings `(theta_a, theta_v)` for raw rows.
    pub fn embed_av(&self, audio: &[Vec<f64>], visual: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut tape = Tape::new();
        let pv = self.params.load(&mut tape);
        let a: Vec<Var> = audio.iter().map(|x| tape.constant(Tensor::row(x.clone()))).collect();
        let v: Vec<Var> = visual.iter().map(|x| tape.constant(Tensor::row(x.clone()))).collect();
        let mut ctx = ForwardCtx::eval();
        let out = self.forward_av(&mut tape, &pv, &a, &v, &mut ctx)?;
        Ok(out
            .iter()
            .map(|o| (tape.value(o.theta_a).data().to_vec(), tape.value(o.theta_v).data().to_vec()))
            .collect())
    }

    /// Eval-mode shared-space text embeddings.
    pub fn embed_text(&self, texts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pv = self.params.load(&mut tape);
        let w: Vec<Var> = texts.iter().map(|x| tape.constant(Tensor::row(x.clone()))).collect();
        let mut ctx = ForwardCtx::eval();
        let out = self.forward_text(&mut tape, &pv, &w, &mut ctx)?;
        Ok(out.iter().map(|o| tape.value(o.theta_w).data().to_vec()).collect())
    }
}

/// Wire one anchor/negative pair's outputs into loss inputs.
pub fn pair_loss_inputs(
    anchor: &AvOutputs,
    anchor_text: &TextOutputs,
    negative: &AvOutputs,
    negative_text: &TextOutputs,
    text: Var,
) -> LossInputs {
    LossInputs {
        theta_a_pos: anchor.theta_a,
        theta_v_pos: anchor.theta_v,
        theta_w_pos: anchor_text.theta_w,
        theta_a_neg: negative.theta_a,
        theta_v_neg: negative.theta_v,
        theta_w_neg: negative_text.theta_w,
        rho_a_pos: anchor.rho_a,
        rho_v_pos: anchor.rho_v,
        rho_w_pos: anchor_text.rho_w,
        rho_a_neg: negative.rho_a,
        rho_v_neg: negative.rho_v,
        text,
        phi_a: anchor.phi_a,
        phi_v: anchor.phi_v,
        phi_w: anchor_text.phi_w,
        phi_a_rec: anchor.phi_a_rec,
        phi_v_rec: anchor.phi_v_rec,
    }
}
