//! Training loop, checkpoints and the per-epoch metric log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use crate::csgm::{self, ContributionRate, GradAccumulator, PairEmbeddings, TraceWriter};
use crate::data::{self, Dataset};
use crate::error::{DaanError, Result};
use crate::eval::{self, GzslReport};
use crate::losses::{self, LossBreakdown, LossVars};
use crate::model::{self, DaanModel};
use crate::nn::{ForwardCtx, Rng};
use crate::optim::Optimizer;
use crate::params::ParamVars;
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// `u128` as decimal text.
    word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<Rng> {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| DaanError::Contract("corrupt rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub model: DaanModel,
    pub optimizer: Optimizer,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(DaanError::Contract(format!("checkpoint version {} unsupported", ck.version)));
        }
        Ok(ck)
    }
}

/// Mean contribution rate of one (modality, part) over an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EtaSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Share of pairs whose rate sat on the floor.
    pub at_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub pairs: usize,
    /// Per-pair mean of every loss component.
    pub loss: LossBreakdown,
    pub csgm_active: bool,
    pub eta: BTreeMap<String, EtaSummary>,
}

/// One anchor/negative pair inside a batch forward.
pub struct PairGraph {
    /// Index of the anchor in the training split.
    pub sample_id: usize,
    pub negative_id: usize,
    pub loss: LossVars,
    pub embeddings: PairEmbeddings,
}

/// Everything a batch forward leaves behind for the backward pass.
pub struct BatchGraph {
    pub tape: Tape,
    pub pv: ParamVars,
    pub pairs: Vec<PairGraph>,
    pub bn_updates: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl BatchGraph {
    /// Per-parameter gradient vectors, indexed like the parameter store.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.pv.iter().map(|(_, v)| grads.get_or_zeros(v, self.tape.value(v).len())).collect()
    }

    pub fn mean_loss(&mut self) -> Result<Var> {
        let totals: Vec<Var> = self.pairs.iter().map(|p| p.loss.total).collect();
        let mut acc = totals[0];
        for &t in &totals[1..] {
            acc = self.tape.add(acc, t)?;
        }
        self.tape.scale(acc, 1.0 / totals.len() as f64)
    }
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: DaanModel,
    pub optimizer: Optimizer,
    rng: Rng,
    pub epoch: usize,
    pub step: u64,
}

struct EpochAcc {
    loss: LossBreakdown,
    pairs: usize,
    eta: BTreeMap<String, (f64, f64, f64, usize, usize)>,
}

impl EpochAcc {
    fn new() -> Self {
        EpochAcc { loss: LossBreakdown::default(), pairs: 0, eta: BTreeMap::new() }
    }

    fn rate(&mut self, r: &ContributionRate, gamma: f64) {
        let e = self.eta.entry(format!("{}/{}", r.modality, r.part)).or_insert((0.0, f64::INFINITY, 0.0, 0, 0));
        e.0 += r.eta;
        e.1 = e.1.min(r.eta);
        e.2 = e.2.max(r.eta);
        e.3 += 1;
        e.4 += (r.eta == gamma) as usize;
    }
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DaanModel::new(cfg.model.clone(), cfg.train.seed)?;
        let optimizer = Optimizer::new(cfg.train.optimizer, cfg.csgm.learning_rate, &model.params);
        let mut rng = Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(1);
        Ok(Trainer { cfg, model, optimizer, rng, epoch: 0, step: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Ok(Trainer {
            rng: ck.rng.restore()?,
            cfg: ck.config,
            model: ck.model,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
            step: self.step,
        }
    }

    /// Seeded shuffle of the training split into batches. A trailing batch
    /// too small to mine from is folded into the previous one.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.cfg.train.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().expect("nonempty");
            batches.last_mut().expect("nonempty").extend(tail);
        }
        batches
    }

    /// Training-mode forward of one batch with in-batch negatives.
    pub fn forward_batch(&mut self, ds: &Dataset, batch: &[usize]) -> Result<BatchGraph> {
        let labels: Vec<usize> = batch.iter().map(|&i| ds.train[i].label).collect();
        if let Some(&l) = labels.iter().find(|&&l| !ds.is_seen(l)) {
            return Err(DaanError::Contract(format!("unseen class {l} reached a training batch")));
        }
        let negatives = (0..batch.len())
            .map(|i| data::mine_negative(&labels, i, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let pv = self.model.params.load(&mut tape);
        let row = |tape: &mut Tape, v: &[f64]| tape.constant(Tensor::row(v.to_vec()));
        let audio: Vec<Var> = batch.iter().map(|&i| row(&mut tape, &ds.train[i].audio)).collect();
        let visual: Vec<Var> = batch.iter().map(|&i| row(&mut tape, &ds.train[i].visual)).collect();
        let texts: Vec<Var> = labels.iter().map(|&l| row(&mut tape, &ds.texts[l].w)).collect();

        let mut ctx = ForwardCtx::train(&mut self.rng);
        let av = self.model.forward_av(&mut tape, &pv, &audio, &visual, &mut ctx)?;
        let tx = self.model.forward_text(&mut tape, &pv, &texts, &mut ctx)?;
        let bn_updates = ctx.take_bn_updates();

        let mut pairs = Vec::with_capacity(batch.len());
        for (i, &j) in negatives.iter().enumerate() {
            let inputs = model::pair_loss_inputs(&av[i], &tx[i], &av[j], &tx[j], texts[i]);
            let loss = losses::loss_total(&mut tape, &inputs, &self.cfg.loss)?;
            let val = |v: Var| tape.value(v).data().to_vec();
            let embeddings = PairEmbeddings {
                a_pos: val(av[i].theta_a),
                a_neg: val(av[j].theta_a),
                v_pos: val(av[i].theta_v),
                v_neg: val(av[j].theta_v),
                w_pos: val(tx[i].theta_w),
                w_neg: val(tx[j].theta_w),
            };
            pairs.push(PairGraph { sample_id: batch[i], negative_id: batch[j], loss, embeddings });
        }
        Ok(BatchGraph { tape, pv, pairs, bn_updates })
    }

    /// Replaces the running batch-norm statistics with the plain average of
    /// training-mode batch statistics over one pass at the current weights.
    /// The momentum estimates lag behind weights that drift along directions
    /// batch norm is blind to. Uses its own rng stream.
    pub fn recalibrate_bn(&mut self, ds: &Dataset) -> Result<()> {
        let mut rng = Rng::seed_from_u64(self.cfg.train.seed);
        rng.set_stream(2);
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(self.cfg.train.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
        }
        let mut sums: Vec<(Vec<f64>, Vec<f64>)> =
            self.model.bn.iter().map(|b| (vec![0.0; b.mean.len()], vec![0.0; b.mean.len()])).collect();
        for batch in &batches {
            let mut tape = Tape::new();
            let pv = self.model.params.load(&mut tape);
            let row = |tape: &mut Tape, v: &[f64]| tape.constant(Tensor::row(v.to_vec()));
            let audio: Vec<Var> = batch.iter().map(|&i| row(&mut tape, &ds.train[i].audio)).collect();
            let visual: Vec<Var> = batch.iter().map(|&i| row(&mut tape, &ds.train[i].visual)).collect();
            let texts: Vec<Var> = batch.iter().map(|&i| row(&mut tape, &ds.texts[ds.train[i].label].w)).collect();
            let mut ctx = ForwardCtx::train(&mut rng);
            self.model.forward_av(&mut tape, &pv, &audio, &visual, &mut ctx)?;
            self.model.forward_text(&mut tape, &pv, &texts, &mut ctx)?;
            for (slot, mean, var) in ctx.take_bn_updates() {
                let (m, v) = &mut sums[slot];
                for j in 0..mean.len() {
                    m[j] += mean[j];
                    v[j] += var[j];
                }
            }
        }
        let n = batches.len() as f64;
        for (state, (m, v)) in self.model.bn.iter_mut().zip(sums) {
            state.mean = m.into_iter().map(|x| x / n).collect();
            state.var = v.into_iter().map(|x| x / n).collect();
        }
        Ok(())
    }

    /// Optimizer step on an accumulated gradient, plus batch-norm commit.
    pub fn apply_step(&mut self, grads: &[Vec<f64>], bn_updates: Vec<(usize, Vec<f64>, Vec<f64>)>, noise: bool) -> Result<()> {
        self.optimizer.apply(&mut self.model.params, grads)?;
        if noise {
            csgm::add_noise(&mut self.model.params, grads, self.cfg.csgm.noise_scale, &mut self.rng)?;
        }
        crate::nn::commit_bn(&mut self.model.bn, bn_updates);
        self.step += 1;
        Ok(())
    }

    fn train_batch<W: Write>(
        &mut self,
        ds: &Dataset,
        batch: &[usize],
        trace: &mut Option<&mut TraceWriter<W>>,
        acc: &mut EpochAcc,
    ) -> Result<()> {
        let mut g = self.forward_batch(ds, batch)?;
        for p in &g.pairs {
            let v = p.loss.values(&g.tape);
            if !v.is_finite() {
                return Err(DaanError::NonFinite { op: "loss_total" });
            }
            acc.loss.accumulate(&v);
        }
        acc.pairs += g.pairs.len();
        let active = self.cfg.csgm.active(self.epoch);
        let mut total = GradAccumulator::new(&self.model.params);
        if active {
            let weight = 1.0 / g.pairs.len() as f64;
            for p in &g.pairs {
                let grads = g.param_grads(&g.tape.backward(p.loss.total)?);
                let t = trace.as_deref_mut().map(|w| (w, self.step, p.sample_id));
                let rates = csgm::modulate_pair(&self.model.params, &grads, &p.embeddings, &self.cfg.csgm, weight, &mut total, t)?;
                for r in &rates {
                    acc.rate(r, self.cfg.csgm.gamma);
                }
            }
        } else {
            let mean = g.mean_loss()?;
            let grads = g.param_grads(&g.tape.backward(mean)?);
            total.add(&grads, None, 1.0)?;
        }
        let bn = std::mem::take(&mut g.bn_updates);
        self.apply_step(&total.grads, bn, active)
    }

    /// One pass over the training split.
    pub fn train_epoch<W: Write>(&mut self, ds: &Dataset, mut trace: Option<&mut TraceWriter<W>>) -> Result<EpochMetrics> {
        let batches = self.epoch_batches(ds.train.len());
        let mut acc = EpochAcc::new();
        let active = self.cfg.csgm.active(self.epoch);
        for (b, batch) in batches.iter().enumerate() {
            match self.train_batch(ds, batch, &mut trace, &mut acc) {
                Ok(()) => {}
                Err(DaanError::NonFinite { op }) => {
                    return Err(DaanError::Divergence {
                        epoch: self.epoch,
                        batch: b,
                        msg: format!("non-finite value from {op}"),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(t) = trace.as_mut() {
            t.flush()?;
        }
        let metrics = EpochMetrics {
            epoch: self.epoch,
            steps: self.step,
            pairs: acc.pairs,
            loss: acc.loss.scaled(1.0 / acc.pairs.max(1) as f64),
            csgm_active: active,
            eta: acc
                .eta
                .into_iter()
                .map(|(k, (sum, min, max, n, floor))| {
                    let n = n.max(1) as f64;
                    (k, EtaSummary { mean: sum / n, min, max, at_floor: floor as f64 / n })
                })
                .collect(),
        };
        self.epoch += 1;
        Ok(metrics)
    }
}

/// Dataset described by the config: generated, or read from feature files.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data.source {
        DataSource::Synthetic => data::generate_synthetic(&cfg.synth_config())?,
        DataSource::Files { train, test } => data::load_dataset(train, test)?,
    };
    if ds.input_dim() != cfg.model.input || ds.text_dim() != cfg.model.text_dim {
        return Err(DaanError::Config(format!(
            "dataset dims (input {}, text {}) disagree with dims.input={} / dims.output={}",
            ds.input_dim(),
            ds.text_dim(),
            cfg.model.input,
            cfg.model.text_dim
        )));
    }
    Ok(ds)
}

pub struct RunOutput {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
    pub report: GzslReport,
    pub split_hash: u64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACE_FILE: &str = "modulation_trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "last_good.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Train `trainer` until `cfg.train.epochs` epochs are complete, writing
/// logs under `out` when given; then evaluate.
pub fn fit(mut trainer: Trainer, ds: &Dataset, out: Option<&Path>) -> Result<RunOutput> {
    let target = trainer.cfg.train.epochs;
    let resuming = trainer.epoch > 0;
    let mut metrics_out = None;
    let mut trace = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), trainer.cfg.to_text())?;
        let open = |name: &str| -> Result<File> {
            let mut o = OpenOptions::new();
            if resuming {
                o.append(true).create(true);
            } else {
                o.write(true).create(true).truncate(true);
            }
            Ok(o.open(dir.join(name))?)
        };
        metrics_out = Some(BufWriter::new(open(METRICS_FILE)?));
        let f = BufWriter::new(open(TRACE_FILE)?);
        trace = Some(if resuming { TraceWriter::resume(f) } else { TraceWriter::new(f)? });
    }
    let mut metrics = Vec::new();
    while trainer.epoch < target {
        let snapshot = trainer.checkpoint();
        match trainer.train_epoch(ds, trace.as_mut()) {
            Ok(m) => {
                log::info!("epoch {} loss {:.6}", m.epoch, m.loss.total);
                if let Some(w) = metrics_out.as_mut() {
                    serde_json::to_writer(&mut *w, &m)?;
                    writeln!(w)?;
                    w.flush()?;
                }
                metrics.push(m);
            }
            Err(e @ DaanError::Divergence { .. }) => {
                if let Some(dir) = out {
                    snapshot.save(&dir.join(LAST_GOOD_FILE))?;
                    log::error!("{e}; last good state written to {}", dir.join(LAST_GOOD_FILE).display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    if trainer.epoch > 0 {
        trainer.recalibrate_bn(ds)?;
    }
    let report = eval::evaluate(&trainer.model, ds, trainer.cfg.fusion_rule)?;
    if let Some(dir) = out {
        trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        write_report(dir, &report)?;
    }
    Ok(RunOutput { trainer, metrics, report, split_hash: ds.split_hash() })
}

pub fn write_report(dir: &Path, report: &GzslReport) -> Result<()> {
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(TABLE_FILE), format!("{report}\n"))?;
    Ok(())
}

/// Fresh run from a config.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput> {
    let ds = load_data(cfg)?;
    fit(Trainer::new(cfg.clone())?, &ds, out)
}
