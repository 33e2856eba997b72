//! Ablation table, one-parameter sweeps, and the run report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::plot::{line_plot, Series};
use super::train::{self, EpochMetrics, METRICS_FILE, TRACE_FILE};
use crate::csgm;
use crate::error::{DaanError, Result};
use crate::eval::GzslReport;
use crate::model::EncoderKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: GzslReport,
    pub split_hash: u64,
}

pub const ABLATION_ROWS: [&str; 4] = ["base", "base+QDMA", "base+QDMA+CSGM(V_c)", "DAAN"];

/// The four configurations of the ablation, in table order.
pub fn ablation_configs(cfg: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let mut base = cfg.clone();
    base.model.encoder = EncoderKind::Mlp;
    base.csgm.enabled = false;
    let mut qdma = cfg.clone();
    qdma.model.encoder = EncoderKind::Qdma;
    qdma.csgm.enabled = false;
    let mut vc = qdma.clone();
    vc.csgm.enabled = true;
    vc.csgm.vc_only = true;
    let mut full = vc.clone();
    full.csgm.vc_only = false;
    ABLATION_ROWS.into_iter().zip([base, qdma, vc, full]).collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = GzslReport::table_header();
    s.push('\n');
    for r in rows {
        s.push_str(&r.report.table_row(&r.name));
        s.push('\n');
    }
    s
}

/// Train and evaluate every ablation row on one shared dataset.
pub fn ablate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let ds = train::load_data(cfg)?;
    let mut rows = Vec::new();
    for (name, c) in ablation_configs(cfg) {
        let dir = out.map(|o| o.join(name.replace(['+', '(', ')'], "_")));
        let run = train::fit(train::Trainer::new(c)?, &ds, dir.as_deref())?;
        log::info!("{name}: split {:016x}", run.split_hash);
        rows.push(AblationRow { name: name.to_string(), report: run.report, split_hash: run.split_hash });
    }
    if rows.windows(2).any(|w| w[0].split_hash != w[1].split_hash) {
        return Err(DaanError::Contract("ablation rows saw different data splits".into()));
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
        fs::write(o.join(train::TABLE_FILE), ablation_table(&rows))?;
    }
    Ok(rows)
}

pub const SWEEP_PARAMS: [&str; 2] = ["tcn.n", "csgm.gamma"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub report: GzslReport,
}

/// One training run per value of `param`, sharing seed and data.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[f64], out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(DaanError::Config(format!("sweep parameter must be one of {SWEEP_PARAMS:?}, got {param:?}")));
    }
    if values.is_empty() {
        return Err(DaanError::Config("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        let text = if param == "tcn.n" { format!("{}", v as usize) } else { v.to_string() };
        c.set(param, &text)?;
        let dir = out.map(|o| o.join(format!("{param}={text}")));
        let run = train::train(&c, dir.as_deref())?;
        points.push(SweepPoint { value: v, report: run.report });
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join(format!("sweep_{param}.csv")), sweep_csv(&points))?;
        for (metric, get) in METRICS {
            let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.value, get(&p.report))).collect();
            let svg = line_plot(&format!("{metric} vs {param}"), param, metric, &[Series { name: metric, points: pts }]);
            fs::write(o.join(format!("sweep_{param}_{metric}.svg")), svg)?;
        }
    }
    Ok(points)
}

type MetricGetter = fn(&GzslReport) -> f64;

const METRICS: [(&str, MetricGetter); 4] =
    [("S", |r| r.s), ("U", |r| r.u), ("HM", |r| r.hm), ("ZSL", |r| r.zsl)];

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("value,S,U,HM,ZSL\n");
    for p in points {
        let r = &p.report;
        let _ = writeln!(s, "{},{},{},{},{}", p.value, r.s, r.u, r.hm, r.zsl);
    }
    s
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || DaanError::Contract(format!("malformed sweep line {}", n + 1));
        let f: Vec<f64> = line.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(SweepPoint {
            value: f[0],
            report: GzslReport { s: f[1], u: f[2], hm: f[3], zsl: f[4], excluded: Vec::new() },
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DaanError::from))
        .collect()
}

/// Summarize a run directory: loss curve, contribution-rate statistics,
/// and plots. Returns the text written to `summary.txt`.
pub fn report(dir: &Path) -> Result<String> {
    let metrics = read_metrics(&dir.join(METRICS_FILE))?;
    let mut s = String::new();
    let _ = writeln!(s, "{:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "epoch", "total", "L_t", "l_rec", "l_ct", "l_w", "L_r");
    for m in &metrics {
        let l = &m.loss;
        let _ = writeln!(
            s,
            "{:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            m.epoch, l.total, l.triplet, l.rec, l.composite_triplet, l.text_triplet, l.regularization
        );
    }
    let loss_pts: Vec<(f64, f64)> = metrics.iter().map(|m| (m.epoch as f64, m.loss.total)).collect();
    fs::write(dir.join("loss.svg"), line_plot("training loss", "epoch", "loss", &[Series { name: "total", points: loss_pts }]))?;

    let trace_path = dir.join(TRACE_FILE);
    if trace_path.exists() {
        let rows = csgm::parse_trace(&fs::read_to_string(&trace_path)?)?;
        let mut keys: Vec<(String, String)> = rows.iter().map(|r| (r.modality.clone(), r.part.clone())).collect();
        keys.sort();
        keys.dedup();
        let _ = writeln!(s, "\n{:<22} {:>8} {:>10} {:>10} {:>10} {:>10}", "modality/part", "rows", "eta mean", "eta min", "eta max", "v_c>0");
        let mut series = Vec::new();
        for (m, p) in &keys {
            let sel: Vec<_> = rows.iter().filter(|r| &r.modality == m && &r.part == p).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.eta).sum::<f64>() / n;
            let min = sel.iter().map(|r| r.eta).fold(f64::INFINITY, f64::min);
            let max = sel.iter().map(|r| r.eta).fold(f64::NEG_INFINITY, f64::max);
            let open = sel.iter().filter(|r| r.v_c > 0.0).count() as f64 / n;
            let _ = writeln!(s, "{:<22} {:>8} {:>10.4} {:>10.4} {:>10.4} {:>10.3}", format!("{m}/{p}"), sel.len(), mean, min, max, open);
            let mut by_step: std::collections::BTreeMap<u64, (f64, usize)> = Default::default();
            for r in &sel {
                let e = by_step.entry(r.step).or_default();
                e.0 += r.eta;
                e.1 += 1;
            }
            series.push((format!("{m}/{p}"), by_step.into_iter().map(|(k, (sum, c))| (k as f64, sum / c as f64)).collect::<Vec<_>>()));
        }
        let series: Vec<Series> = series.iter().map(|(n, p)| Series { name: n, points: p.clone() }).collect();
        fs::write(dir.join("eta.svg"), line_plot("mean contribution rate per step", "step", "eta", &series))?;
    }
    let report_path = dir.join(train::REPORT_FILE);
    if report_path.exists() {
        let r: GzslReport = serde_json::from_str(&fs::read_to_string(report_path)?)?;
        let _ = writeln!(s, "\n{r}");
    }
    fs::write(dir.join("summary.txt"), &s)?;
    Ok(s)
}
