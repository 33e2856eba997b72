//! Experiment configuration as flat `key=value` text with dotted keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::csgm::{CsgmConfig, VcIndexing};
use crate::data::SynthConfig;
use crate::error::{DaanError, Result};
use crate::eval::FusionRule;
use crate::losses::{LossConfig, RecDistance};
use crate::model::{EncoderKind, ModelConfig};
use crate::optim::OptimizerKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 32, seed: 0, optimizer: OptimizerKind::Adam }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic,
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Generator settings; its dims are taken from the model dims.
    pub synth: SynthConfig,
    /// Generator seed; follows `train.seed` when unset.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Synthetic, synth: SynthConfig::default(), seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub csgm: CsgmConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub fusion_rule: FusionRule,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| DaanError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(DaanError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(name, _)| *name == value).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        DaanError::Config(format!("{key}: expected one of {}, got {value:?}", names.join("|")))
    })
}

const ENCODERS: &[(&str, EncoderKind)] = &[("qdma", EncoderKind::Qdma), ("mlp", EncoderKind::Mlp)];
const INDEXINGS: &[(&str, VcIndexing)] = &[("triplet", VcIndexing::Triplet), ("literal", VcIndexing::Literal)];
const OPTIMIZERS: &[(&str, OptimizerKind)] = &[("adam", OptimizerKind::Adam), ("sgd", OptimizerKind::Sgd)];
const REC: &[(&str, RecDistance)] = &[("mse", RecDistance::MeanSquared), ("euclidean", RecDistance::Euclidean)];
const RULES: &[(&str, FusionRule)] =
    &[("average", FusionRule::Average), ("audio", FusionRule::Audio), ("visual", FusionRule::Visual)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, o)| o == v).map_or("?", |(n, _)| n)
}

impl ExperimentConfig {
    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let s = &mut self.data.synth;
        match key.trim() {
            "dims.input" => m.input = parse(key, v)?,
            "dims.hidden" => m.hidden = parse(key, v)?,
            "dims.output" => {
                m.output = parse(key, v)?;
                m.text_dim = m.output;
            }
            "model.encoder" => m.encoder = choice(key, v, ENCODERS)?,
            "qdma.beta" => m.qdma.beta = parse(key, v)?,
            "qdma.tokens" => m.qdma.tokens = parse(key, v)?,
            "qdma.groups" => m.qdma.groups = parse(key, v)?,
            "qdma.dropout" => m.qdma.dropout = parse(key, v)?,
            "tcn.n" => m.tcn.layers = parse(key, v)?,
            "tcn.k" => m.tcn.dilation = parse(key, v)?,
            "tcn.kernel" => m.tcn.kernel = parse(key, v)?,
            "tcn.x_hid" => m.tcn.steps = parse(key, v)?,
            "fusion.tokens" => m.fusion.tokens = parse(key, v)?,
            "fusion.heads" => m.fusion.heads = parse(key, v)?,
            "fusion.dropout" => m.fusion.dropout = parse(key, v)?,
            "csgm.gamma" => self.csgm.gamma = parse(key, v)?,
            "csgm.mu" => self.csgm.mu = parse(key, v)?,
            "csgm.noise_scale" => self.csgm.noise_scale = parse(key, v)?,
            "csgm.enabled" => self.csgm.enabled = parse_bool(key, v)?,
            "csgm.vc_only" => self.csgm.vc_only = parse_bool(key, v)?,
            "csgm.epoch_start" => self.csgm.epoch_start = parse(key, v)?,
            "csgm.epoch_end" => self.csgm.epoch_end = if v == "none" { None } else { Some(parse(key, v)?) },
            "csgm.indexing" => self.csgm.indexing = choice(key, v, INDEXINGS)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.csgm.learning_rate = parse(key, v)?,
            "train.margin" => self.loss.margin = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.optimizer" => self.train.optimizer = choice(key, v, OPTIMIZERS)?,
            "train.rec_distance" => self.loss.rec_distance = choice(key, v, REC)?,
            "data.source" => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "files" => match &self.data.source {
                        DataSource::Files { .. } => self.data.source.clone(),
                        DataSource::Synthetic => {
                            DataSource::Files { train: "train.daan".into(), test: "test.daan".into() }
                        }
                    },
                    _ => return Err(DaanError::Config(format!("{key}: expected synthetic|files, got {v:?}"))),
                }
            }
            "data.train_path" | "data.test_path" => {
                let (mut train, mut test) = match &self.data.source {
                    DataSource::Files { train, test } => (train.clone(), test.clone()),
                    DataSource::Synthetic => ("train.daan".into(), "test.daan".into()),
                };
                if key.trim() == "data.train_path" {
                    train = v.into();
                } else {
                    test = v.into();
                }
                self.data.source = DataSource::Files { train, test };
            }
            "data.seen" => s.num_seen = parse(key, v)?,
            "data.unseen" => s.num_unseen = parse(key, v)?,
            "data.train_per_class" => s.train_per_class = parse(key, v)?,
            "data.test_per_class" => s.test_per_class = parse(key, v)?,
            "data.latent_dim" => s.latent_dim = parse(key, v)?,
            "data.audio_snr" => s.audio_snr = parse(key, v)?,
            "data.visual_snr" => s.visual_snr = parse(key, v)?,
            "data.content_bias" => s.content_bias_std = parse(key, v)?,
            "data.seed" => self.data.seed = if v == "auto" { None } else { Some(parse(key, v)?) },
            "eval.fusion" => self.fusion_rule = choice(key, v, RULES)?,
            other => return Err(DaanError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DaanError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v).map_err(|e| DaanError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| DaanError::Config(format!("--set {kv:?}: expected key=value")))?;
        self.set(k, v)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.data.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("dims.input", m.input.to_string());
        kv("dims.hidden", m.hidden.to_string());
        kv("dims.output", m.output.to_string());
        kv("model.encoder", name_of(ENCODERS, &m.encoder).into());
        kv("qdma.beta", m.qdma.beta.to_string());
        kv("qdma.tokens", m.qdma.tokens.to_string());
        kv("qdma.groups", m.qdma.groups.to_string());
        kv("qdma.dropout", m.qdma.dropout.to_string());
        kv("tcn.n", m.tcn.layers.to_string());
        kv("tcn.k", m.tcn.dilation.to_string());
        kv("tcn.kernel", m.tcn.kernel.to_string());
        kv("tcn.x_hid", m.tcn.steps.to_string());
        kv("fusion.tokens", m.fusion.tokens.to_string());
        kv("fusion.heads", m.fusion.heads.to_string());
        kv("fusion.dropout", m.fusion.dropout.to_string());
        kv("csgm.gamma", self.csgm.gamma.to_string());
        kv("csgm.mu", self.csgm.mu.to_string());
        kv("csgm.noise_scale", self.csgm.noise_scale.to_string());
        kv("csgm.enabled", self.csgm.enabled.to_string());
        kv("csgm.vc_only", self.csgm.vc_only.to_string());
        kv("csgm.epoch_start", self.csgm.epoch_start.to_string());
        kv("csgm.epoch_end", self.csgm.epoch_end.map_or("none".into(), |e| e.to_string()));
        kv("csgm.indexing", name_of(INDEXINGS, &self.csgm.indexing).into());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.learning_rate", self.csgm.learning_rate.to_string());
        kv("train.margin", self.loss.margin.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("train.optimizer", name_of(OPTIMIZERS, &self.train.optimizer).into());
        kv("train.rec_distance", name_of(REC, &self.loss.rec_distance).into());
        match &self.data.source {
            DataSource::Synthetic => kv("data.source", "synthetic".into()),
            DataSource::Files { train, test } => {
                kv("data.source", "files".into());
                kv("data.train_path", train.display().to_string());
                kv("data.test_path", test.display().to_string());
            }
        }
        kv("data.seen", s.num_seen.to_string());
        kv("data.unseen", s.num_unseen.to_string());
        kv("data.train_per_class", s.train_per_class.to_string());
        kv("data.test_per_class", s.test_per_class.to_string());
        kv("data.latent_dim", s.latent_dim.to_string());
        kv("data.audio_snr", s.audio_snr.to_string());
        kv("data.visual_snr", s.visual_snr.to_string());
        kv("data.content_bias", s.content_bias_std.to_string());
        kv("data.seed", self.data.seed.map_or("auto".into(), |x| x.to_string()));
        kv("eval.fusion", name_of(RULES, &self.fusion_rule).into());
        out
    }

    /// Generator settings with dims and seed resolved.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            input_dim: self.model.input,
            text_dim: self.model.text_dim,
            seed: self.data.seed.unwrap_or(self.train.seed),
            ..self.data.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.csgm.validate()?;
        if self.train.batch_size < 2 {
            return Err(DaanError::Config("train.batch_size must be at least 2 to mine negatives".into()));
        }
        if !(self.loss.margin >= 0.0 && self.loss.margin.is_finite()) {
            return Err(DaanError::Config("train.margin must be nonnegative".into()));
        }
        if self.data.source == DataSource::Synthetic {
            self.synth_config().validate()?;
        }
        Ok(())
    }
}
