mod common;

use std::fs;

use daan_core::data::{
    generate_synthetic, load_dataset, load_split, mine_negative, save_dataset, save_split, Dataset, SplitKind,
    SynthConfig,
};
use daan_core::DaanError;
use daan_oracles::linear_probe_accuracy;
use proptest::prelude::*;

fn small() -> SynthConfig {
    SynthConfig {
        num_seen: 5,
        num_unseen: 2,
        train_per_class: 30,
        test_per_class: 10,
        input_dim: 16,
        text_dim: 8,
        latent_dim: 4,
        ..Default::default()
    }
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn assert_matches_rounded(loaded: &Dataset, orig: &Dataset) {
    assert_eq!(loaded.classes, orig.classes);
    assert_eq!(loaded.train.len(), orig.train.len());
    assert_eq!(loaded.test.len(), orig.test.len());
    for (a, b) in loaded.train.iter().chain(&loaded.test).zip(orig.train.iter().chain(&orig.test)) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.audio, rounded(&b.audio));
        assert_eq!(a.visual, rounded(&b.visual));
    }
    for (a, b) in loaded.texts.iter().zip(&orig.texts) {
        assert!(a.w.iter().zip(&b.w).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}

#[test]
fn binary_and_jsonl_roundtrip() {
    let ds = generate_synthetic(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ext in ["bin", "jsonl"] {
        save_dataset(dir.path(), &ds, ext).unwrap();
        let loaded =
            load_dataset(&dir.path().join(format!("train.{ext}")), &dir.path().join(format!("test.{ext}"))).unwrap();
        assert_matches_rounded(&loaded, &ds);
        // a second pass is lossless
        save_dataset(dir.path(), &loaded, ext).unwrap();
        let again =
            load_dataset(&dir.path().join(format!("train.{ext}")), &dir.path().join(format!("test.{ext}"))).unwrap();
        assert_eq!(again.split_hash(), loaded.split_hash());
    }
}

fn format_offset(r: daan_core::Result<impl std::fmt::Debug>) -> u64 {
    match r {
        Err(DaanError::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn binary_corruption_is_located() {
    let cfg = small();
    let ds = generate_synthetic(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.bin");
    save_split(&path, &ds, SplitKind::Test).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert_eq!(format_offset(load_split(&path, SplitKind::Test)), 0);

    // cut inside the last visual vector
    let last_visual = good.len() - 4 * cfg.input_dim;
    fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert_eq!(format_offset(load_split(&path, SplitKind::Test)), last_visual as u64);

    let mut long = good.clone();
    long.push(0);
    fs::write(&path, &long).unwrap();
    assert_eq!(format_offset(load_split(&path, SplitKind::Test)), good.len() as u64);

    // first seen flag follows the 28-byte header and one text vector
    let flag_at = 28 + 4 * cfg.text_dim;
    let mut flag = good.clone();
    flag[flag_at] = 7;
    fs::write(&path, &flag).unwrap();
    assert_eq!(format_offset(load_split(&path, SplitKind::Test)), flag_at as u64);

    let mut nan = good.clone();
    nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, &nan).unwrap();
    assert_eq!(format_offset(load_split(&path, SplitKind::Test)), 28);
}

#[test]
fn jsonl_corruption_is_located() {
    let ds = generate_synthetic(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    save_split(&path, &ds, SplitKind::Test).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let second_line = text.find('\n').unwrap() + 1;
    let mut bad = text.clone();
    bad.insert_str(second_line, "{not json}\n");
    fs::write(&path, bad).unwrap();
    assert_eq!(format_offset(load_split(&path, SplitKind::Test)), second_line as u64);
}

#[test]
fn unseen_class_in_train_file_is_rejected() {
    let ds = generate_synthetic(&small()).unwrap();
    assert!(ds.test.iter().any(|s| !ds.is_seen(s.label)));
    let dir = tempfile::tempdir().unwrap();
    for ext in ["bin", "jsonl"] {
        let path = dir.path().join(format!("leak.{ext}"));
        save_split(&path, &ds, SplitKind::Test).unwrap();
        assert!(load_split(&path, SplitKind::Test).is_ok());
        assert!(matches!(load_split(&path, SplitKind::Train), Err(DaanError::Generation(_))));
    }
    let mut leaked = ds.clone();
    let unseen = ds.test.iter().find(|s| !ds.is_seen(s.label)).unwrap().clone();
    leaked.train.push(unseen);
    assert!(matches!(leaked.validate(), Err(DaanError::Generation(_))));
}

#[test]
fn mismatched_class_tables_are_rejected() {
    let a = generate_synthetic(&small()).unwrap();
    let b = generate_synthetic(&SynthConfig { seed: 9, ..small() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_split(&dir.path().join("train.bin"), &a, SplitKind::Train).unwrap();
    save_split(&dir.path().join("test.bin"), &b, SplitKind::Test).unwrap();
    let r = load_dataset(&dir.path().join("train.bin"), &dir.path().join("test.bin"));
    assert!(matches!(r, Err(DaanError::Contract(_))));
}

#[test]
fn generated_split_shape() {
    let cfg = small();
    let ds = generate_synthetic(&cfg).unwrap();
    assert_eq!(ds.classes.iter().filter(|c| c.seen).count(), cfg.num_seen);
    assert_eq!(ds.train.len(), cfg.num_seen * cfg.train_per_class);
    assert_eq!(ds.test.len(), cfg.num_classes() * cfg.test_per_class);
    assert!(ds.train.iter().all(|s| ds.is_seen(s.label)));
    for t in &ds.texts {
        let n = t.w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn bad_synth_configs_are_rejected() {
    for bad in [
        SynthConfig { num_unseen: 0, ..small() },
        SynthConfig { latent_dim: 9, ..small() },
        SynthConfig { audio_snr: 0.0, ..small() },
        SynthConfig { visual_snr: f64::NAN, ..small() },
        SynthConfig { content_bias_std: -1.0, ..small() },
    ] {
        assert!(matches!(generate_synthetic(&bad), Err(DaanError::Config(_))));
    }
}

fn probe(ds: &Dataset, visual: bool) -> f64 {
    let pick = |s: &daan_core::data::Sample| if visual { s.visual.clone() } else { s.audio.clone() };
    let seen_test: Vec<_> = ds.test.iter().filter(|s| ds.is_seen(s.label)).collect();
    linear_probe_accuracy(
        &ds.train.iter().map(pick).collect::<Vec<_>>(),
        &ds.train.iter().map(|s| s.label).collect::<Vec<_>>(),
        &seen_test.iter().map(|s| pick(s)).collect::<Vec<_>>(),
        &seen_test.iter().map(|s| s.label).collect::<Vec<_>>(),
        ds.classes.len(),
    )
    .unwrap()
}

#[test]
fn visual_features_are_more_separable_than_audio() {
    let ds = generate_synthetic(&small()).unwrap();
    let (a, v) = (probe(&ds, false), probe(&ds, true));
    assert!(v > a, "visual probe {v} vs audio probe {a}");
}

/// Within-class share of the total audio variance.
fn within_share(ds: &Dataset) -> f64 {
    let dim = ds.input_dim();
    let n = ds.train.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| ds.train.iter().map(|s| s.audio[j]).sum::<f64>() / n).collect();
    let total: f64 = ds.train.iter().map(|s| s.audio.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>()).sum();
    let mut within = 0.0;
    for c in ds.classes.iter().filter(|c| c.seen) {
        let members: Vec<_> = ds.train.iter().filter(|s| s.label == c.id).collect();
        let k = members.len() as f64;
        let cm: Vec<f64> = (0..dim).map(|j| members.iter().map(|s| s.audio[j]).sum::<f64>() / k).collect();
        within += members.iter().map(|s| s.audio.iter().zip(&cm).map(|(x, m)| (x - m).powi(2)).sum::<f64>()).sum::<f64>();
    }
    within / total
}

#[test]
fn audio_noise_falls_with_snr() {
    let shares: Vec<f64> = [0.1, 1.0, 10.0, 100.0]
        .iter()
        .map(|&snr| within_share(&generate_synthetic(&SynthConfig { audio_snr: snr, ..small() }).unwrap()))
        .collect();
    assert!(shares.windows(2).all(|w| w[1] < w[0]), "{shares:?}");
}

#[test]
fn mining_is_uniform_over_other_labels() {
    let labels = [0, 0, 1, 2, 2, 3, 0];
    let mut rng = common::rng(21);
    let draws = 8000;
    let mut counts = [0usize; 7];
    for _ in 0..draws {
        let j = mine_negative(&labels, 1, &mut rng).unwrap();
        assert_ne!(labels[j], 0);
        counts[j] += 1;
    }
    let expected = draws as f64 / 4.0;
    let chi2: f64 = [2, 3, 4, 5].iter().map(|&j| (counts[j] as f64 - expected).powi(2) / expected).sum();
    // 3 degrees of freedom, p = 0.001
    assert!(chi2 < 16.27, "chi-square {chi2}, counts {counts:?}");
}

#[test]
fn single_label_batch_cannot_mine() {
    let mut rng = common::rng(22);
    assert!(matches!(
        mine_negative(&[4, 4, 4], 2, &mut rng),
        Err(DaanError::Mining { anchor: 2, batch: 3 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_seed_roundtrips(seed in any::<u64>(), jsonl in any::<bool>()) {
        let ds = generate_synthetic(&SynthConfig { seed, train_per_class: 3, test_per_class: 2, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ext = if jsonl { "jsonl" } else { "bin" };
        save_dataset(dir.path(), &ds, ext).unwrap();
        let loaded =
            load_dataset(&dir.path().join(format!("train.{ext}")), &dir.path().join(format!("test.{ext}"))).unwrap();
        assert_matches_rounded(&loaded, &ds);
    }
}
