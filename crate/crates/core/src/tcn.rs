//! Temporal bypass: causal conv, a stack of dilated causal convs, residual add.
//!
//! The `hidden` vector is viewed as `steps` time steps of `hidden / steps`
//! channels. The last time step of the stack output is broadcast-added back
//! onto every step of the input.

use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::nn::{self, Rng};
use crate::params::{Modality, ParamGroup, ParamId, ParamStore, ParamVars, QdmaPart};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    /// Number of dilated layers.
    pub layers: usize,
    /// Dilation shared by every dilated layer.
    pub dilation: usize,
    /// Kernel taps per convolution.
    pub kernel: usize,
    /// Time steps the hidden vector is folded into.
    pub steps: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig { layers: 2, dilation: 3, kernel: 3, steps: 8 }
    }
}

impl TcnConfig {
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(DaanError::Config("tcn.n must be at least 1".into()));
        }
        if self.dilation == 0 || self.kernel == 0 {
            return Err(DaanError::Config("tcn.k and tcn.kernel must be positive".into()));
        }
        if self.steps == 0 || !hidden.is_multiple_of(self.steps) {
            return Err(DaanError::Config(format!(
                "hidden dim {hidden} must be divisible by tcn.x_hid ({})",
                self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TcnParams {
    pub causal: ParamId,
    pub dilated: Vec<ParamId>,
}

impl TcnParams {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, modality: Modality, hidden: usize, cfg: &TcnConfig) -> Self {
        let group = ParamGroup::qdma(modality, QdmaPart::Tcn);
        let ch = hidden / cfg.steps;
        let shape = [ch, ch, cfg.kernel];
        let fan = ch * cfg.kernel;
        let causal = store.add(format!("tcn.{modality}.causal"), group, nn::glorot(rng, &shape, fan, fan));
        let dilated = (0..cfg.layers)
            .map(|l| store.add(format!("tcn.{modality}.dilated{l}"), group, nn::glorot(rng, &shape, fan, fan)))
            .collect();
        TcnParams { causal, dilated }
    }

    pub fn vars(&self, pv: &ParamVars) -> (Var, Vec<Var>) {
        (pv.get(self.causal), self.dilated.iter().map(|&id| pv.get(id)).collect())
    }
}

/// `1 x hidden` row to `steps x channels`.
pub fn fold_steps(tape: &mut Tape, o3: Var, steps: usize) -> Result<Var> {
    let n = tape.value(o3).len();
    if steps == 0 || !n.is_multiple_of(steps) {
        return Err(DaanError::Shape(format!("cannot fold {n} features into {steps} time steps")));
    }
    tape.reshape(o3, &[steps, n / steps])
}

/// Stack output `y = D(C(x)) + x` on the folded input, shape `steps x channels`.
pub fn tcn_forward(tape: &mut Tape, o3: Var, causal: Var, dilated: &[Var], cfg: &TcnConfig) -> Result<Var> {
    let x = fold_steps(tape, o3, cfg.steps)?;
    let seq = tape.transpose(x)?;
    let mut h = tape.conv1d_causal(seq, causal, 1)?;
    for &w in dilated {
        h = tape.conv1d_causal(h, w, cfg.dilation)?;
    }
    let h = tape.transpose(h)?;
    tape.add(h, x)
}

/// Adds the last time step of `y` to every step of the folded `o3` and
/// flattens back to `1 x hidden`.
pub fn temporal_embed_add(tape: &mut Tape, o3: Var, y: Var) -> Result<Var> {
    let steps = tape.value(y).rows();
    let x = fold_steps(tape, o3, steps)?;
    if tape.value(x).shape() != tape.value(y).shape() {
        return Err(DaanError::Dimension {
            op: "temporal_embed_add",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(y).shape().to_vec(),
        });
    }
    let last = tape.slice_rows(y, steps - 1, 1)?;
    let phi = tape.add_row(x, last)?;
    let n = tape.value(phi).len();
    tape.reshape(phi, &[1, n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn kernels(tape: &mut Tape, ch: usize, k: usize, layers: usize, fill: f64) -> (Var, Vec<Var>) {
        let c = tape.param(Tensor::filled(&[ch, ch, k], fill));
        let d = (0..layers).map(|_| tape.param(Tensor::filled(&[ch, ch, k], fill))).collect();
        (c, d)
    }

    #[test]
    fn zero_kernels_give_pure_residual() {
        let cfg = TcnConfig { layers: 2, dilation: 2, kernel: 3, steps: 4 };
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        let o3 = tape.constant(Tensor::row(data.clone()));
        let (c, d) = kernels(&mut tape, 2, 3, 2, 0.0);
        let y = tcn_forward(&mut tape, o3, c, &d, &cfg).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn zero_temporal_embedding_is_identity() {
        let mut tape = Tape::new();
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let o3 = tape.constant(Tensor::row(data.clone()));
        let y = tape.constant(Tensor::zeros(&[3, 2]));
        let phi = temporal_embed_add(&mut tape, o3, y).unwrap();
        assert_eq!(tape.value(phi).data(), data.as_slice());
    }

    #[test]
    fn constant_last_step_shifts_every_token() {
        let mut tape = Tape::new();
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let o3 = tape.constant(Tensor::row(data.clone()));
        let y = tape.constant(Tensor::matrix(3, 2, vec![9.0, 9.0, 9.0, 9.0, 0.25, 0.25]).unwrap());
        let phi = temporal_embed_add(&mut tape, o3, y).unwrap();
        for (a, b) in tape.value(phi).data().iter().zip(&data) {
            assert_eq!(a - b, 0.25);
        }
    }

    #[test]
    fn fold_mismatch_is_shape_error() {
        let cfg = TcnConfig { steps: 3, ..Default::default() };
        let mut tape = Tape::new();
        let o3 = tape.constant(Tensor::row(vec![0.0; 8]));
        let (c, d) = kernels(&mut tape, 2, 3, 2, 0.1);
        assert!(matches!(tcn_forward(&mut tape, o3, c, &d, &cfg), Err(DaanError::Shape(_))));
        assert!(cfg.validate(8).is_err());
        assert!(TcnConfig { layers: 0, ..Default::default() }.validate(64).is_err());
    }
}
