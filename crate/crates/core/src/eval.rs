//! Nearest-text-embedding classification and (G)ZSL metrics.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{DaanError, Result};
use crate::model::DaanModel;

/// How the audio and visual projections are combined before decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionRule {
    #[default]
    Average,
    Audio,
    Visual,
}

impl FusionRule {
    pub fn fuse(self, a: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            FusionRule::Average => a.iter().zip(v).map(|(x, y)| (x + y) / 2.0).collect(),
            FusionRule::Audio => a.to_vec(),
            FusionRule::Visual => v.to_vec(),
        }
    }
}

/// Percentages. `excluded` lists classes without test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GzslReport {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    #[serde(rename = "ZSL")]
    pub zsl: f64,
    #[serde(default)]
    pub excluded: Vec<usize>,
}

impl GzslReport {
    pub fn table_header() -> String {
        format!("{:<24} {:>7} {:>7} {:>7} {:>7}", "", "S", "U", "HM", "ZSL")
    }

    pub fn table_row(&self, name: &str) -> String {
        format!("{:<24} {:>7.2} {:>7.2} {:>7.2} {:>7.2}", name, self.s, self.u, self.hm, self.zsl)
    }
}

impl fmt::Display for GzslReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        write!(f, "{}", self.table_row("DAAN"))
    }
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * u * s / (u + s)
    } else {
        0.0
    }
}

/// Index into `candidates` of the nearest text embedding; ties go to the
/// lowest class id.
pub fn classify(query: &[f64], candidates: &[(usize, &[f64])]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(DaanError::Contract("empty candidate set".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for &(id, w) in candidates {
        let d = query.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        best = match best {
            Some((bd, bid)) if bd < d || (bd == d && bid < id) => Some((bd, bid)),
            _ => Some((d, id)),
        };
    }
    Ok(best.map(|(_, id)| id).expect("nonempty"))
}

/// Mean over `classes` of per-class accuracy; classes absent from
/// `labels` are returned separately and left out of the mean.
pub fn mean_class_accuracy(labels: &[usize], preds: &[usize], classes: &[usize]) -> (f64, Vec<usize>) {
    let mut sum = 0.0;
    let mut counted = 0;
    let mut excluded = Vec::new();
    for &c in classes {
        let (mut n, mut hit) = (0usize, 0usize);
        for (&l, &p) in labels.iter().zip(preds) {
            if l == c {
                n += 1;
                hit += (p == c) as usize;
            }
        }
        if n == 0 {
            excluded.push(c);
        } else {
            sum += hit as f64 / n as f64;
            counted += 1;
        }
    }
    let acc = if counted == 0 { 0.0 } else { 100.0 * sum / counted as f64 };
    (acc, excluded)
}

/// Metrics from fused query embeddings and per-class text embeddings.
pub fn report_from_embeddings(
    queries: &[Vec<f64>],
    labels: &[usize],
    texts: &[Vec<f64>],
    seen: &[bool],
) -> Result<GzslReport> {
    let all: Vec<(usize, &[f64])> = texts.iter().enumerate().map(|(i, w)| (i, w.as_slice())).collect();
    let unseen_only: Vec<(usize, &[f64])> = all.iter().copied().filter(|&(i, _)| !seen[i]).collect();
    let gzsl = queries.iter().map(|q| classify(q, &all)).collect::<Result<Vec<_>>>()?;
    let seen_ids: Vec<usize> = (0..texts.len()).filter(|&c| seen[c]).collect();
    let unseen_ids: Vec<usize> = (0..texts.len()).filter(|&c| !seen[c]).collect();
    let (s, mut excluded) = mean_class_accuracy(labels, &gzsl, &seen_ids);
    let (u, ex_u) = mean_class_accuracy(labels, &gzsl, &unseen_ids);
    excluded.extend(ex_u);
    excluded.sort_unstable();

    let mut zsl_labels = Vec::new();
    let mut zsl_preds = Vec::new();
    if !unseen_only.is_empty() {
        for (q, &l) in queries.iter().zip(labels) {
            if !seen[l] {
                zsl_labels.push(l);
                zsl_preds.push(classify(q, &unseen_only)?);
            }
        }
    }
    let (zsl, _) = mean_class_accuracy(&zsl_labels, &zsl_preds, &unseen_ids);
    for c in &excluded {
        log::warn!("class {c} has no test samples and is excluded from the mean");
    }
    Ok(GzslReport { s, u, hm: harmonic_mean(s, u), zsl, excluded })
}

/// Thread cap from `DAAN_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("DAAN_THREADS").ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

const EVAL_CHUNK: usize = 64;

/// Evaluate in eval mode on the test split; computes both GZSL and ZSL scores.
pub fn evaluate(model: &DaanModel, ds: &Dataset, rule: FusionRule) -> Result<GzslReport> {
    let texts = model.embed_text(&ds.texts.iter().map(|t| t.w.clone()).collect::<Vec<_>>())?;
    let chunks: Vec<&[crate::data::Sample]> = ds.test.chunks(EVAL_CHUNK).collect();
    let embed = |chunk: &&[crate::data::Sample]| -> Result<Vec<Vec<f64>>> {
        let a: Vec<Vec<f64>> = chunk.iter().map(|s| s.audio.clone()).collect();
        let v: Vec<Vec<f64>> = chunk.iter().map(|s| s.visual.clone()).collect();
        Ok(model.embed_av(&a, &v)?.into_iter().map(|(ta, tv)| rule.fuse(&ta, &tv)).collect())
    };
    let run = || chunks.par_iter().map(embed).collect::<Result<Vec<_>>>();
    let per_chunk = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| DaanError::Config(format!("DAAN_THREADS: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let queries: Vec<Vec<f64>> = per_chunk.into_iter().flatten().collect();
    let labels: Vec<usize> = ds.test.iter().map(|s| s.label).collect();
    let seen: Vec<bool> = ds.classes.iter().map(|c| c.seen).collect();
    report_from_embeddings(&queries, &labels, &texts, &seen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hm_table_rows() {
        assert!((harmonic_mean(52.38, 23.48) - 32.42).abs() < 0.05);
        assert!((harmonic_mean(26.04, 8.21) - 12.48).abs() < 0.05);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let w = [1.0, 0.0];
        let x = [-1.0, 0.0];
        let c: Vec<(usize, &[f64])> = vec![(3, &w), (1, &x)];
        assert_eq!(classify(&[0.0, 0.0], &c).unwrap(), 1);
        assert!(classify(&[0.0], &[]).is_err());
    }

    #[test]
    fn perfect_toy_classifier() {
        let texts = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let seen = [true, true, false];
        let labels = [0, 1, 2, 2];
        let q: Vec<Vec<f64>> = labels.iter().map(|&l| texts[l].clone()).collect();
        let r = report_from_embeddings(&q, &labels, &texts, &seen).unwrap();
        assert_eq!((r.s, r.u, r.hm, r.zsl), (100.0, 100.0, 100.0, 100.0));
        assert!(r.excluded.is_empty());
    }

    #[test]
    fn empty_class_is_excluded() {
        let (acc, ex) = mean_class_accuracy(&[0, 0, 2], &[0, 1, 2], &[0, 1, 2]);
        assert_eq!(ex, vec![1]);
        assert!((acc - 75.0).abs() < 1e-12);
    }
}
