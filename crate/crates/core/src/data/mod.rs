//! Samples, class splits and the synthetic audio-visual generator.

mod io;

pub use io::{load_dataset, load_split, save_dataset, save_split, SplitFile, SplitKind};

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DaanError, Result};
use crate::nn::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: usize,
    pub name: String,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub class_id: usize,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: Vec<ClassLabel>,
    pub texts: Vec<TextEmbedding>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.first().or(self.test.first()).map_or(0, |s| s.audio.len())
    }

    pub fn text_dim(&self) -> usize {
        self.texts.first().map_or(0, |t| t.w.len())
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.classes[class].seen
    }

    /// Every consistency rule a dataset must satisfy before training.
    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(DaanError::Contract(format!("class ids not dense: slot {i} holds {}", c.id)));
            }
        }
        if self.texts.len() != n || self.texts.iter().enumerate().any(|(i, t)| t.class_id != i) {
            return Err(DaanError::Contract("one text embedding per class required, in id order".into()));
        }
        let (d_in, d_txt) = (self.input_dim(), self.text_dim());
        if self.texts.iter().any(|t| t.w.len() != d_txt || t.w.iter().any(|x| !x.is_finite())) {
            return Err(DaanError::Contract("text embeddings must be finite and equal-sized".into()));
        }
        for s in self.train.iter().chain(&self.test) {
            if s.label >= n {
                return Err(DaanError::Contract(format!("label {} out of range", s.label)));
            }
            if s.audio.len() != d_in || s.visual.len() != d_in {
                return Err(DaanError::Contract("sample dims disagree".into()));
            }
            if s.audio.iter().chain(&s.visual).any(|x| !x.is_finite()) {
                return Err(DaanError::Contract("sample holds non-finite features".into()));
            }
        }
        if let Some(s) = self.train.iter().find(|s| !self.classes[s.label].seen) {
            return Err(DaanError::Generation(format!("unseen class {} present in the training split", s.label)));
        }
        Ok(())
    }

    /// FNV-1a over both splits' bits.
    pub fn split_hash(&self) -> u64 {
        let mut h = crate::params::Fnv64::default();
        use std::hash::Hasher;
        for (tag, split) in [(0u8, &self.train), (1u8, &self.test)] {
            h.write_u8(tag);
            for s in split {
                h.write_usize(s.label);
                for x in s.audio.iter().chain(&s.visual) {
                    h.write_u64(x.to_bits());
                }
            }
        }
        for t in &self.texts {
            for x in &t.w {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub text_dim: usize,
    /// Rank of the space the class prototypes are drawn from.
    pub latent_dim: usize,
    /// Signal-to-noise power ratio; `inf` disables noise.
    pub audio_snr: f64,
    pub visual_snr: f64,
    pub content_bias_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_seen: 20,
            num_unseen: 5,
            train_per_class: 100,
            test_per_class: 20,
            input_dim: 64,
            text_dim: 32,
            latent_dim: 8,
            audio_snr: 1.0,
            visual_snr: 100.0,
            content_bias_std: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_seen == 0 || self.num_unseen == 0 {
            return Err(DaanError::Config("need at least one seen and one unseen class".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DaanError::Config("samples per class must be positive".into()));
        }
        if self.input_dim == 0 || self.text_dim == 0 {
            return Err(DaanError::Config("feature dims must be positive".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > self.text_dim {
            return Err(DaanError::Config(format!(
                "data.latent_dim must lie in [1, {}], got {}",
                self.text_dim, self.latent_dim
            )));
        }
        for (name, snr) in [("audio_snr", self.audio_snr), ("visual_snr", self.visual_snr)] {
            if snr.is_nan() || snr <= 0.0 {
                return Err(DaanError::Config(format!("data.{name} must be positive, got {snr}")));
            }
        }
        if !(self.content_bias_std >= 0.0 && self.content_bias_std.is_finite()) {
            return Err(DaanError::Config("data.content_bias must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_unseen
    }
}

// Stream tags keep every random draw on its own counter-addressed stream.
const STREAM_TEXT: u64 = 1;
const STREAM_MAP: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TEST: u64 = 4;

fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | (a << 28) | b);
    rng
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn to_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Random linear map `rows x cols` with unit-variance outputs.
struct RandomMap {
    m: Vec<Vec<f64>>,
}

impl RandomMap {
    fn new(rng: &mut Rng, rows: usize, cols: usize) -> Self {
        let s = 1.0 / (cols as f64).sqrt();
        RandomMap { m: (0..rows).map(|_| gaussian(rng, cols).into_iter().map(|x| x * s).collect()).collect() }
    }

    fn apply(&self, t: &[f64]) -> Vec<f64> {
        self.m.iter().map(|row| row.iter().zip(t).map(|(a, b)| a * b).sum()).collect()
    }
}

fn draw_feature(rng: &mut Rng, clean: &[f64], noise_std: f64, bias_std: f64) -> Vec<f64> {
    let n = clean.len();
    let dir = unit(gaussian(rng, n));
    let b = bias_std * rng.sample::<f64, _>(StandardNormal);
    let noise = gaussian(rng, n);
    to_f32((0..n).map(|k| clean[k] + b * dir[k] + noise_std * noise[k]).collect())
}

/// Pure function of `cfg`: identical configs give bit-identical datasets.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let nc = cfg.num_classes();
    let classes: Vec<ClassLabel> = (0..nc)
        .map(|id| ClassLabel { id, name: format!("class{id:03}"), seen: id < cfg.num_seen })
        .collect();
    let basis = RandomMap::new(&mut stream_rng(cfg.seed, STREAM_TEXT, 0, 1), cfg.text_dim, cfg.latent_dim);
    let protos: Vec<Vec<f64>> = (0..nc)
        .map(|c| {
            let z = gaussian(&mut stream_rng(cfg.seed, STREAM_TEXT, c as u64, 0), cfg.latent_dim);
            to_f32(unit(basis.apply(&z)))
        })
        .collect();
    let maps: Vec<RandomMap> = (0..2)
        .map(|m| RandomMap::new(&mut stream_rng(cfg.seed, STREAM_MAP, m, 0), cfg.input_dim, cfg.text_dim))
        .collect();
    let clean: Vec<[Vec<f64>; 2]> = protos.iter().map(|t| [maps[0].apply(t), maps[1].apply(t)]).collect();

    // noise power relative to the average clean signal power of each modality
    let noise_std: Vec<f64> = [cfg.audio_snr, cfg.visual_snr]
        .iter()
        .enumerate()
        .map(|(m, &snr)| {
            let power = clean.iter().flat_map(|c| c[m].iter()).map(|x| x * x).sum::<f64>()
                / (nc * cfg.input_dim) as f64;
            if snr.is_infinite() {
                0.0
            } else {
                (power / snr).sqrt()
            }
        })
        .collect();

    let make = |tag: u64, class: usize, index: usize| {
        let mut rng = stream_rng(cfg.seed, tag, class as u64, index as u64);
        let audio = draw_feature(&mut rng, &clean[class][0], noise_std[0], cfg.content_bias_std);
        let visual = draw_feature(&mut rng, &clean[class][1], noise_std[1], cfg.content_bias_std);
        Sample { audio, visual, label: class }
    };
    let train: Vec<Sample> = (0..cfg.num_seen * cfg.train_per_class)
        .into_par_iter()
        .map(|i| make(STREAM_TRAIN, i / cfg.train_per_class, i % cfg.train_per_class))
        .collect();
    let test: Vec<Sample> = (0..nc * cfg.test_per_class)
        .into_par_iter()
        .map(|i| make(STREAM_TEST, i / cfg.test_per_class, i % cfg.test_per_class))
        .collect();

    let ds = Dataset {
        classes,
        texts: protos.into_iter().enumerate().map(|(class_id, w)| TextEmbedding { class_id, w }).collect(),
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Uniformly pick a batch member whose label differs from the anchor's.
pub fn mine_negative(labels: &[usize], anchor: usize, rng: &mut Rng) -> Result<usize> {
    let own = labels[anchor];
    let candidates: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != own).collect();
    if candidates.is_empty() {
        return Err(DaanError::Mining { anchor, batch: labels.len() });
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}
