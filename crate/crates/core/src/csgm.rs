//! Sample-level gradient modulation of the QDMA parameter parts.
//!
//! Every anchor/negative pair gets its own contribution rate per
//! (modality, part). The rate scales that pair's gradient for the part
//! before it is accumulated into the batch gradient.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::nn::Rng;
use crate::params::{Modality, ParamGroup, ParamStore, QdmaPart};

/// Which embeddings enter the three convergence factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VcIndexing {
    /// `d(a+,w+,a-) * d(w+,a-,a-) * d(a+,w-,w-)`. The two repeated-index
    /// factors compare a distance with itself, so the product is always 0.
    Literal,
    /// `d(a+,w+,a-) * d(w+,a+,a-) * d(a+,w+,w-)`.
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsgmConfig {
    pub gamma: f64,
    pub mu: f64,
    pub noise_scale: f64,
    pub enabled: bool,
    pub vc_only: bool,
    pub learning_rate: f64,
    /// First epoch (0-based) with modulation active.
    pub epoch_start: usize,
    /// Epoch at which modulation stops; `None` keeps it on.
    pub epoch_end: Option<usize>,
    pub indexing: VcIndexing,
}

impl Default for CsgmConfig {
    fn default() -> Self {
        CsgmConfig {
            gamma: 0.45,
            mu: 1.15,
            noise_scale: 1e-3,
            enabled: true,
            vc_only: false,
            learning_rate: 1e-3,
            epoch_start: 0,
            epoch_end: None,
            indexing: VcIndexing::Triplet,
        }
    }
}

impl CsgmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DaanError::Config(format!("csgm.gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(DaanError::Config(format!("csgm.mu must be positive, got {}", self.mu)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(DaanError::Config("csgm.noise_scale must be nonnegative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DaanError::Config("train.learning_rate must be positive".into()));
        }
        if let Some(end) = self.epoch_end {
            if end < self.epoch_start {
                return Err(DaanError::Config("csgm epoch window is empty".into()));
            }
        }
        Ok(())
    }

    /// Whether modulation applies during `epoch`.
    pub fn active(&self, epoch: usize) -> bool {
        self.enabled && epoch >= self.epoch_start && self.epoch_end.is_none_or(|e| epoch < e)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(d(m, e) - d(m, n), 0)`.
pub fn delta_raw(m: &[f64], e: &[f64], n: &[f64]) -> f64 {
    (euclid(m, e) - euclid(m, n)).max(0.0)
}

/// Largest double below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `1 - exp(-mu * delta_raw)`, in `[0, 1)`. Large gaps would round to 1.
pub fn delta(m: &[f64], e: &[f64], n: &[f64], mu: f64) -> f64 {
    (-(-mu * delta_raw(m, e, n)).exp_m1()).min(BELOW_ONE)
}

/// Shared-space embeddings of one pair, as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEmbeddings {
    pub a_pos: Vec<f64>,
    pub a_neg: Vec<f64>,
    pub v_pos: Vec<f64>,
    pub v_neg: Vec<f64>,
    pub w_pos: Vec<f64>,
    pub w_neg: Vec<f64>,
}

impl PairEmbeddings {
    fn check(&self) -> Result<()> {
        let n = self.a_pos.len();
        let all = [&self.a_pos, &self.a_neg, &self.v_pos, &self.v_neg, &self.w_pos, &self.w_neg];
        if n == 0 || all.iter().any(|v| v.len() != n) {
            return Err(DaanError::Contract("pair embeddings missing or of unequal size".into()));
        }
        Ok(())
    }
}

/// Per-modality convergence rates `(audio, visual)`, each in `[0, 1)`.
pub fn convergence_rates(e: &PairEmbeddings, mu: f64, indexing: VcIndexing) -> Result<[f64; 2]> {
    e.check()?;
    let rate = |pos: &[f64], neg: &[f64]| match indexing {
        VcIndexing::Literal => {
            delta(pos, &e.w_pos, neg, mu) * delta(&e.w_pos, neg, neg, mu) * delta(pos, &e.w_neg, &e.w_neg, mu)
        }
        VcIndexing::Triplet => {
            delta(pos, &e.w_pos, neg, mu) * delta(&e.w_pos, pos, neg, mu) * delta(pos, &e.w_pos, &e.w_neg, mu)
        }
    };
    Ok([rate(&e.a_pos, &e.a_neg), rate(&e.v_pos, &e.v_neg)])
}

/// Squared gradient norm over squared parameter norm for one part.
pub fn optimization_rate_raw(store: &ParamStore, grads: &[Vec<f64>], modality: Modality, part: QdmaPart) -> Result<f64> {
    let ids = store.ids_in(ParamGroup::qdma(modality, part));
    if ids.is_empty() {
        return Err(DaanError::Contract(format!("no parameters registered for {modality}/{part}")));
    }
    let mut g2 = 0.0;
    let mut p2 = 0.0;
    for id in ids {
        g2 += grads[id.0].iter().map(|g| g * g).sum::<f64>();
        p2 += store.tensor(id).sum_sq();
    }
    if p2 == 0.0 {
        return Err(DaanError::DegenerateParameters(format!("{modality}/{part} has zero norm")));
    }
    Ok(g2 / p2)
}

/// `V_o / (1 + V_o)`, or 1 when only the convergence rate is used.
pub fn optimization_rate(
    store: &ParamStore,
    grads: &[Vec<f64>],
    modality: Modality,
    part: QdmaPart,
    vc_only: bool,
) -> Result<f64> {
    if vc_only {
        return Ok(1.0);
    }
    let v = optimization_rate_raw(store, grads, modality, part)?;
    Ok(v / (1.0 + v))
}

pub fn contribution_rate(v_c: f64, v_o: f64, gamma: f64) -> f64 {
    (v_c * v_o).max(gamma)
}

/// One row of the modulation trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContributionRate {
    pub modality: Modality,
    pub part: QdmaPart,
    pub v_c: f64,
    /// Normalized optimization rate.
    pub v_o: f64,
    pub eta: f64,
}

/// Contribution rates of every (modality, part) for one pair.
pub fn pair_rates(
    store: &ParamStore,
    grads: &[Vec<f64>],
    emb: &PairEmbeddings,
    cfg: &CsgmConfig,
) -> Result<Vec<ContributionRate>> {
    let vc = convergence_rates(emb, cfg.mu, cfg.indexing)?;
    let mut out = Vec::with_capacity(4);
    for m in Modality::ALL {
        for part in QdmaPart::ALL {
            let v_c = vc[m as usize];
            let v_o = optimization_rate(store, grads, m, part, cfg.vc_only)?;
            let eta = contribution_rate(v_c, v_o, cfg.gamma);
            debug_assert!(eta >= cfg.gamma);
            out.push(ContributionRate { modality: m, part, v_c, v_o, eta });
        }
    }
    Ok(out)
}

/// Batch gradient built pair by pair.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub grads: Vec<Vec<f64>>,
    groups: Vec<ParamGroup>,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            grads: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
            groups: store.iter().map(|(_, p)| p.group).collect(),
        }
    }

    /// Adds `weight * eta * g` for QDMA parts and `weight * g` elsewhere.
    /// `rates == None` means no modulation (every eta is 1).
    pub fn add(&mut self, g: &[Vec<f64>], rates: Option<&[ContributionRate]>, weight: f64) -> Result<()> {
        for (i, gi) in g.iter().enumerate() {
            let eta = match (self.groups[i], rates) {
                (ParamGroup::Qdma { modality, part }, Some(rates)) => rates
                    .iter()
                    .find(|r| r.modality == modality && r.part == part)
                    .map(|r| r.eta)
                    .ok_or_else(|| DaanError::Contract(format!("no contribution rate for {modality}/{part}")))?,
                _ => 1.0,
            };
            let c = weight * eta;
            for (a, &x) in self.grads[i].iter_mut().zip(gi) {
                *a += c * x;
            }
        }
        Ok(())
    }
}

/// Rates for one pair, checked against the floor, traced, and folded into
/// `acc` with `weight`. `trace` carries the writer, step and sample id.
pub fn modulate_pair<W: Write>(
    store: &ParamStore,
    grads: &[Vec<f64>],
    emb: &PairEmbeddings,
    cfg: &CsgmConfig,
    weight: f64,
    acc: &mut GradAccumulator,
    trace: Option<(&mut TraceWriter<W>, u64, usize)>,
) -> Result<Vec<ContributionRate>> {
    let rates = pair_rates(store, grads, emb, cfg)?;
    if let Some(r) = rates.iter().find(|r| !(r.eta >= cfg.gamma)) {
        return Err(DaanError::Contract(format!("eta {} below the floor {}", r.eta, cfg.gamma)));
    }
    if let Some((w, step, sample_id)) = trace {
        for r in &rates {
            w.record(step, sample_id, r)?;
        }
    }
    acc.add(grads, Some(&rates), weight)?;
    Ok(rates)
}

/// Gaussian perturbation of every QDMA tensor, std = `scale * RMS(grad)`.
pub fn add_noise(store: &mut ParamStore, grads: &[Vec<f64>], scale: f64, rng: &mut Rng) -> Result<()> {
    if scale == 0.0 {
        return Ok(());
    }
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| matches!(p.group, ParamGroup::Qdma { .. }))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let g = &grads[id.0];
        let rms = (g.iter().map(|x| x * x).sum::<f64>() / g.len().max(1) as f64).sqrt();
        let std = scale * rms;
        if std == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, std).map_err(|e| DaanError::Parameter(e.to_string()))?;
        for x in store.get_mut(id).value.data_mut() {
            *x += normal.sample(rng);
        }
    }
    Ok(())
}

/// Header-first CSV writer for the modulation trace.
pub struct TraceWriter<W: Write> {
    out: W,
}

pub const TRACE_HEADER: &str = "step,sample_id,modality,part,v_c,v_o,eta";

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{TRACE_HEADER}")?;
        Ok(TraceWriter { out })
    }

    /// Continue an existing trace without a header.
    pub fn resume(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn record(&mut self, step: u64, sample_id: usize, r: &ContributionRate) -> Result<()> {
        writeln!(self.out, "{step},{sample_id},{},{},{:e},{:e},{:e}", r.modality, r.part, r.v_c, r.v_o, r.eta)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// A parsed trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub sample_id: usize,
    pub modality: String,
    pub part: String,
    pub v_c: f64,
    pub v_o: f64,
    pub eta: f64,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || DaanError::Contract(format!("malformed trace line {}", n + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        rows.push(TraceRow {
            step: f[0].parse().map_err(|_| bad())?,
            sample_id: f[1].parse().map_err(|_| bad())?,
            modality: f[2].to_string(),
            part: f[3].to_string(),
            v_c: f[4].parse().map_err(|_| bad())?,
            v_o: f[5].parse().map_err(|_| bad())?,
            eta: f[6].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}
