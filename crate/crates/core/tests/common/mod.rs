#![allow(dead_code)]

use daan_core::fusion::FusionConfig;
use daan_core::losses::{LossConfig, LossInputs, LossVars};
use daan_core::model::{self, DaanModel, ModelConfig};
use daan_core::nn::ForwardCtx;
use daan_core::qdma::QdmaConfig;
use daan_core::tcn::TcnConfig;
use daan_core::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// input 16, hidden 16, output 8, two attention tokens, two dilated layers.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input: 16,
        hidden: 16,
        output: 8,
        text_dim: 8,
        encoder: model::EncoderKind::Qdma,
        qdma: QdmaConfig { beta: 0.5, tokens: 2, groups: 4, dropout: 0.1 },
        tcn: TcnConfig { layers: 2, dilation: 2, kernel: 2, steps: 4 },
        fusion: FusionConfig { tokens: 2, heads: 1, dropout: 0.1 },
    }
}

/// Raw inputs of one anchor/negative pair.
#[derive(Debug, Clone)]
pub struct PairInputs {
    pub audio: [Vec<f64>; 2],
    pub visual: [Vec<f64>; 2],
    pub text: [Vec<f64>; 2],
}

impl PairInputs {
    pub fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut v = |n| normal_vec(rng, n, 1.0);
        PairInputs {
            audio: [v(cfg.input), v(cfg.input)],
            visual: [v(cfg.input), v(cfg.input)],
            text: [v(cfg.text_dim), v(cfg.text_dim)],
        }
    }
}

/// Eval-mode forward of one pair; returns the tape, the parameter leaves and
/// the loss handles.
pub fn pair_forward(m: &DaanModel, x: &PairInputs, loss: &LossConfig) -> (Tape, Vec<Var>, LossVars) {
    let mut tape = Tape::new();
    let pv = m.params.load(&mut tape);
    let row = |tape: &mut Tape, v: &Vec<f64>| tape.constant(Tensor::row(v.clone()));
    let audio: Vec<Var> = x.audio.iter().map(|v| row(&mut tape, v)).collect();
    let visual: Vec<Var> = x.visual.iter().map(|v| row(&mut tape, v)).collect();
    let text: Vec<Var> = x.text.iter().map(|v| row(&mut tape, v)).collect();
    let mut ctx = ForwardCtx::eval();
    let av = m.forward_av(&mut tape, &pv, &audio, &visual, &mut ctx).unwrap();
    let tx = m.forward_text(&mut tape, &pv, &text, &mut ctx).unwrap();
    let inputs: LossInputs = model::pair_loss_inputs(&av[0], &tx[0], &av[1], &tx[1], text[0]);
    let vars = daan_core::losses::loss_total(&mut tape, &inputs, loss).unwrap();
    let leaves = pv.iter().map(|(_, v)| v).collect();
    (tape, leaves, vars)
}

pub fn flat_params(m: &DaanModel) -> Vec<f64> {
    m.params.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

pub fn set_flat_params(m: &mut DaanModel, flat: &[f64]) {
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    let mut k = 0;
    for id in ids {
        let d = m.params.get_mut(id).value.data_mut();
        d.copy_from_slice(&flat[k..k + d.len()]);
        k += d.len();
    }
}
