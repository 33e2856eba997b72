use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "dims.input = 16
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

fn daan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daan")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = daan(args);
    assert!(out.status.success(), "daan {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let msg = ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(msg.contains("32 train / 24 test"), "{msg}");
    let train_path = format!("data.train_path={}", s(&data.join("train.daan")));
    let test_path = format!("data.test_path={}", s(&data.join("test.daan")));

    let table = ok(&["train", "--config", s(&cfg), "--set", &train_path, "--set", &test_path, "--out", s(&run)]);
    assert!(table.contains("HM") && table.contains("DAAN"), "{table}");
    for f in ["metrics.jsonl", "modulation_trace.csv", "checkpoint.json", "report.json", "config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report_before = fs::read_to_string(run.join("report.json")).unwrap();

    // evaluating the saved checkpoint reproduces the training-time report
    let eval = ok(&["eval", "--out", s(&run)]);
    assert_eq!(eval, table);
    assert_eq!(fs::read_to_string(run.join("report.json")).unwrap(), report_before);

    let summary = ok(&["report", "--out", s(&run)]);
    assert!(summary.contains("epoch"));
    assert!(run.join("loss.svg").exists());

    ok(&["train", "--config", s(&cfg), "--set", &train_path, "--set", &test_path, "--set", "train.epochs=3", "--out", s(&run), "--resume"]);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn jsonl_data_matches_synthetic_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--jsonl"]);
    assert!(data.join("train.jsonl").exists() && data.join("test.jsonl").exists());
    let first = fs::read_to_string(data.join("train.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().contains("\"num_samples\":32"));
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = daan(&["train", "--set", "no.such=1", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let out = daan(&["eval", "--out", s(&dir.path().join("missing"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"));

    let out = daan(&["sweep", "--param", "qdma.beta", "--values", "0.1", "--out", s(dir.path())]);
    assert!(!out.status.success());
}
