//! Triplet, composite and regularization losses for one anchor/negative pair.

use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecDistance {
    Euclidean,
    MeanSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub rec_distance: RecDistance,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 1.0, rec_distance: RecDistance::MeanSquared }
    }
}

/// Scalar values of every loss component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Shared-space triplets (`L_t`).
    pub triplet: f64,
    /// Decoder reconstruction (`l_rec`).
    pub rec: f64,
    /// Decoded-space triplets (`l_ct`).
    pub composite_triplet: f64,
    /// Text-anchored triplets (`l_w`).
    pub text_triplet: f64,
    /// Hidden-space regularization (`L_r`).
    pub regularization: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn composite(&self) -> f64 {
        self.rec + self.composite_triplet + self.text_triplet
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.triplet += other.triplet;
        self.rec += other.rec;
        self.composite_triplet += other.composite_triplet;
        self.text_triplet += other.text_triplet;
        self.regularization += other.regularization;
        self.total += other.total;
    }

    pub fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            triplet: self.triplet * c,
            rec: self.rec * c,
            composite_triplet: self.composite_triplet * c,
            text_triplet: self.text_triplet * c,
            regularization: self.regularization * c,
            total: self.total * c,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.triplet, self.rec, self.composite_triplet, self.text_triplet, self.regularization, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape handles of every embedding a pair contributes to the loss.
///
/// `_pos` entries come from the anchor sample, `_neg` from its mined
/// negative; `text` is the anchor's class embedding.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub theta_a_pos: Var,
    pub theta_v_pos: Var,
    pub theta_w_pos: Var,
    pub theta_a_neg: Var,
    pub theta_v_neg: Var,
    pub theta_w_neg: Var,
    pub rho_a_pos: Var,
    pub rho_v_pos: Var,
    pub rho_w_pos: Var,
    pub rho_a_neg: Var,
    pub rho_v_neg: Var,
    pub text: Var,
    pub phi_a: Var,
    pub phi_v: Var,
    pub phi_w: Var,
    pub phi_a_rec: Var,
    pub phi_v_rec: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub triplet: Var,
    pub rec: Var,
    pub composite_triplet: Var,
    pub text_triplet: Var,
    pub regularization: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            triplet: tape.scalar_value(self.triplet),
            rec: tape.scalar_value(self.rec),
            composite_triplet: tape.scalar_value(self.composite_triplet),
            text_triplet: tape.scalar_value(self.text_triplet),
            regularization: tape.scalar_value(self.regularization),
            total: tape.scalar_value(self.total),
        }
    }
}

/// `max(0, d(anchor, positive) - d(anchor, negative) + margin)`.
pub fn triplet(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let dp = tape.distance(anchor, positive)?;
    let dn = tape.distance(anchor, negative)?;
    let gap = tape.sub(dp, dn)?;
    let m = tape.constant(Tensor::scalar(margin));
    let shifted = tape.add(gap, m)?;
    tape.relu(shifted)
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn same_len(tape: &Tape, group: &str, vars: &[Var]) -> Result<()> {
    let n = tape.value(vars[0]).len();
    for &v in vars {
        if tape.value(v).len() != n {
            return Err(DaanError::Contract(format!(
                "{group} embeddings disagree in size ({} vs {n})",
                tape.value(v).len()
            )));
        }
    }
    Ok(())
}

/// Assemble every loss component for one pair.
pub fn loss_total(tape: &mut Tape, e: &LossInputs, cfg: &LossConfig) -> Result<LossVars> {
    same_len(
        tape,
        "projected",
        &[e.theta_a_pos, e.theta_v_pos, e.theta_w_pos, e.theta_a_neg, e.theta_v_neg, e.theta_w_neg],
    )?;
    same_len(tape, "decoded", &[e.rho_a_pos, e.rho_v_pos, e.rho_w_pos, e.rho_a_neg, e.rho_v_neg, e.text])?;
    same_len(tape, "hidden", &[e.phi_a, e.phi_v, e.phi_w, e.phi_a_rec, e.phi_v_rec])?;
    let m = cfg.margin;

    let lt = [
        triplet(tape, e.theta_a_pos, e.theta_w_pos, e.theta_a_neg, m)?,
        triplet(tape, e.theta_v_pos, e.theta_w_pos, e.theta_v_neg, m)?,
        triplet(tape, e.theta_w_pos, e.theta_a_pos, e.theta_w_neg, m)?,
        triplet(tape, e.theta_w_pos, e.theta_v_pos, e.theta_w_neg, m)?,
    ];
    let l_t = sum_all(tape, &lt)?;

    let rec_d = |tape: &mut Tape, a: Var, b: Var| match cfg.rec_distance {
        RecDistance::Euclidean => tape.distance(a, b),
        RecDistance::MeanSquared => tape.mean_sq_distance(a, b),
    };
    let rec = [
        rec_d(tape, e.rho_a_pos, e.text)?,
        rec_d(tape, e.rho_v_pos, e.text)?,
        rec_d(tape, e.rho_w_pos, e.text)?,
    ];
    let l_rec = sum_all(tape, &rec)?;

    let ct = [
        triplet(tape, e.rho_w_pos, e.rho_a_pos, e.rho_a_neg, m)?,
        triplet(tape, e.rho_w_pos, e.rho_v_pos, e.rho_v_neg, m)?,
    ];
    let l_ct = sum_all(tape, &ct)?;

    let lw = [
        triplet(tape, e.theta_w_pos, e.theta_a_pos, e.theta_a_neg, m)?,
        triplet(tape, e.theta_w_pos, e.theta_v_pos, e.theta_v_neg, m)?,
        triplet(tape, e.theta_a_pos, e.theta_w_pos, e.theta_w_neg, m)?,
        triplet(tape, e.theta_v_pos, e.theta_w_pos, e.theta_w_neg, m)?,
    ];
    let l_w = sum_all(tape, &lw)?;

    let reg = [
        tape.distance(e.phi_a_rec, e.phi_a)?,
        tape.distance(e.phi_v_rec, e.phi_v)?,
        tape.distance(e.phi_a, e.phi_w)?,
        tape.distance(e.phi_v, e.phi_w)?,
    ];
    let l_r = sum_all(tape, &reg)?;

    let composite = sum_all(tape, &[l_rec, l_ct, l_w])?;
    let total = sum_all(tape, &[l_t, composite, l_r])?;
    Ok(LossVars { triplet: l_t, rec: l_rec, composite_triplet: l_ct, text_triplet: l_w, regularization: l_r, total })
}
