use std::fs;

use daan_core::csgm;
use daan_core::runner::experiments::{read_metrics, ABLATION_ROWS};
use daan_core::runner::train::{CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE, TRACE_FILE};
use daan_core::runner::{
    ablate, ablation_table, fit, load_data, parse_sweep_csv, report, sweep, sweep_csv, train, Checkpoint,
    DataSource, ExperimentConfig, Trainer,
};
use daan_core::DaanError;

const TINY: &str = "
dims.input = 16
dims.hidden = 16
dims.output = 8
qdma.tokens = 2
qdma.groups = 4
tcn.x_hid = 4
fusion.tokens = 2
fusion.heads = 1
data.seen = 4
data.unseen = 2
data.train_per_class = 8
data.test_per_class = 4
data.latent_dim = 4
train.batch_size = 16
train.epochs = 2
";

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(TINY).unwrap();
    cfg
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let mut cfg = tiny();
    cfg.train.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, Some(dir.path())).unwrap();
    assert!(run.metrics.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
    assert_eq!(fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap().trim(), csgm::TRACE_HEADER);
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let fresh = Trainer::new(cfg).unwrap();
    assert_eq!(ck.model.params.bit_hash(), fresh.model.params.bit_hash());
    assert_eq!(ck.model.bn, fresh.model.bn);
    assert_eq!(ck.epoch, 0);
}

#[test]
fn run_directory_contents() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(&tiny(), Some(dir.path())).unwrap();
    assert_eq!(run.metrics.len(), 2);
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), run.metrics);
    let trace = csgm::parse_trace(&fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap()).unwrap();
    // four (modality, part) rows per pair, one pair per training sample
    let pairs: usize = run.metrics.iter().map(|m| m.pairs).sum();
    assert_eq!(trace.len(), 4 * pairs);
    assert!(trace.iter().all(|r| r.eta >= run.trainer.cfg.csgm.gamma));
    let saved: daan_core::eval::GzslReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(saved, run.report);

    let summary = report(dir.path()).unwrap();
    assert!(summary.lines().count() > 2 + 4);
    for f in ["loss.svg", "eta.svg", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert!(fs::read_to_string(dir.path().join("loss.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn resuming_a_run_directory_matches_a_straight_run() {
    let straight_dir = tempfile::tempdir().unwrap();
    let straight = train(&tiny(), Some(straight_dir.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = tiny();
    first.train.epochs = 1;
    train(&first, Some(dir.path())).unwrap();
    let mut trainer = Trainer::from_checkpoint(Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap()).unwrap();
    trainer.cfg.train.epochs = 2;
    let ds = load_data(&trainer.cfg).unwrap();
    let resumed = fit(trainer, &ds, Some(dir.path())).unwrap();

    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(dir.path(), METRICS_FILE), read(straight_dir.path(), METRICS_FILE));
    assert_eq!(read(dir.path(), TRACE_FILE), read(straight_dir.path(), TRACE_FILE));
    assert_eq!(resumed.report, straight.report);
    assert_eq!(resumed.trainer.model.params.bit_hash(), straight.trainer.model.params.bit_hash());
}

#[test]
fn config_text_roundtrip() {
    let mut cfg = tiny();
    cfg.apply_text(
        "model.encoder = mlp\ncsgm.indexing = literal\ncsgm.epoch_end = 7\ntrain.optimizer = sgd\n\
         train.rec_distance = euclidean\ndata.seed = 42\neval.fusion = visual\ndata.train_path = a/b.bin\n\
         csgm.gamma = 0.3  # trailing comment\n",
    )
    .unwrap();
    assert!(matches!(cfg.data.source, DataSource::Files { .. }));
    let mut back = ExperimentConfig::default();
    back.apply_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_text(), cfg.to_text());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    fs::write(&path, cfg.to_text()).unwrap();
    assert_eq!(ExperimentConfig::from_file(&path).unwrap(), cfg);
}

#[test]
fn config_errors_name_the_line() {
    let mut cfg = ExperimentConfig::default();
    let err = cfg.apply_text("train.epochs = 3\nno.such.key = 1\n").unwrap_err();
    assert!(matches!(&err, DaanError::Config(m) if m.contains("line 2")), "{err}");
    assert!(cfg.apply_text("train.epochs = many").is_err());
    assert!(cfg.apply_text("csgm.enabled = maybe").is_err());
    assert!(cfg.apply_text("just words").is_err());
    assert!(cfg.apply_override("train.seed").is_err());
    cfg.apply_override("train.seed=5").unwrap();
    assert_eq!(cfg.train.seed, 5);

    let mut bad = tiny();
    bad.train.batch_size = 1;
    assert!(Trainer::new(bad).is_err());
}

#[test]
fn sweep_csv_shape_and_roundtrip() {
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let points = sweep(&cfg, "csgm.gamma", &[0.3, 0.9], Some(dir.path())).unwrap();
    assert_eq!(points.len(), 2);
    let csv = fs::read_to_string(dir.path().join("sweep_csgm.gamma.csv")).unwrap();
    assert_eq!(csv, sweep_csv(&points));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "value,S,U,HM,ZSL");
    assert!(lines.iter().all(|l| l.split(',').count() == 5));
    let parsed = parse_sweep_csv(&csv).unwrap();
    for (p, q) in parsed.iter().zip(&points) {
        assert_eq!(p.value, q.value);
        assert_eq!((p.report.s, p.report.u, p.report.hm, p.report.zsl), (q.report.s, q.report.u, q.report.hm, q.report.zsl));
    }
    assert!(dir.path().join("sweep_csgm.gamma_HM.svg").exists());

    assert!(matches!(sweep(&cfg, "qdma.beta", &[0.5], None), Err(DaanError::Config(_))));
    assert!(sweep(&cfg, "tcn.n", &[], None).is_err());
    assert!(parse_sweep_csv("value,S,U,HM,ZSL\n1,2,3\n").is_err());
}

#[test]
fn ablation_rows_share_the_split() {
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(&cfg, Some(dir.path())).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ABLATION_ROWS);
    assert!(rows.windows(2).all(|w| w[0].split_hash == w[1].split_hash));
    let table = ablation_table(&rows);
    assert_eq!(table.lines().count(), 5);
    assert_eq!(fs::read_to_string(dir.path().join("table.txt")).unwrap(), table);
    assert!(dir.path().join("ablation.json").exists());
}
