//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    /// Plain `theta -= lr * g`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = match kind {
            OptimizerKind::Adam => store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(DaanError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    for (x, g) in store.get_mut(id).value.data_mut().iter_mut().zip(&grads[id.0]) {
                        *x -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for id in ids {
                    let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
                    let data = store.get_mut(id).value.data_mut();
                    for j in 0..data.len() {
                        let g = grads[id.0][j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                        data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        if store.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(DaanError::NonFinite { op: "optimizer step" });
        }
        Ok(())
    }
}
