mod common;

use daan_core::eval::{classify, harmonic_mean, mean_class_accuracy, report_from_embeddings, FusionRule, GzslReport};
use daan_oracles::nearest_scan;
use proptest::prelude::*;

fn candidates(texts: &[Vec<f64>]) -> Vec<(usize, &[f64])> {
    texts.iter().enumerate().map(|(i, w)| (i, w.as_slice())).collect()
}

#[test]
fn perfect_embeddings_score_full_marks() {
    let mut rng = common::rng(1);
    let texts: Vec<Vec<f64>> = (0..6).map(|_| common::normal_vec(&mut rng, 5, 1.0)).collect();
    let seen = [true, true, true, true, false, false];
    let labels: Vec<usize> = (0..6).flat_map(|c| [c; 3]).collect();
    let queries: Vec<Vec<f64>> = labels.iter().map(|&c| texts[c].clone()).collect();
    let r = report_from_embeddings(&queries, &labels, &texts, &seen).unwrap();
    assert_eq!((r.s, r.u, r.hm, r.zsl), (100.0, 100.0, 100.0, 100.0));
    assert!(r.excluded.is_empty());
}

#[test]
fn accuracy_is_class_balanced() {
    // class 0: 1 of 1 right; class 1: 1 of 9 right
    let mut labels = vec![0];
    let mut preds = vec![0];
    labels.extend([1; 9]);
    preds.extend([1, 0, 0, 0, 0, 0, 0, 0, 0]);
    let (acc, excluded) = mean_class_accuracy(&labels, &preds, &[0, 1, 2]);
    assert!((acc - 100.0 * (1.0 + 1.0 / 9.0) / 2.0).abs() < 1e-12);
    assert_eq!(excluded, vec![2]);

    // duplicating one class's samples leaves the mean unchanged
    let mut dl = labels.clone();
    let mut dp = preds.clone();
    dl.extend([0; 50]);
    dp.extend([0; 50]);
    assert!((mean_class_accuracy(&dl, &dp, &[0, 1]).0 - acc).abs() < 1e-12);
}

#[test]
fn zsl_only_ranks_unseen_classes() {
    // the unseen query sits on a seen text, so GZSL misses it while ZSL,
    // which only sees unseen candidates, picks the closest unseen one
    let texts = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 3.0]];
    let seen = [true, false, false];
    let queries = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 2.9]];
    let labels = vec![0, 1, 2];
    let r = report_from_embeddings(&queries, &labels, &texts, &seen).unwrap();
    assert_eq!(r.s, 100.0);
    // class 1 is wrong in both settings: ZSL picks class 2 at distance ~3
    assert_eq!(r.u, 50.0);
    assert_eq!(r.zsl, 50.0);
    assert!((r.hm - harmonic_mean(100.0, 50.0)).abs() < 1e-12);
}

#[test]
fn missing_test_class_is_excluded() {
    let texts = vec![vec![0.0], vec![1.0], vec![5.0]];
    let r = report_from_embeddings(&[vec![0.0], vec![5.0]], &[0, 2], &texts, &[true, true, false]).unwrap();
    assert_eq!(r.excluded, vec![1]);
    assert_eq!((r.s, r.u), (100.0, 100.0));
}

#[test]
fn harmonic_mean_edges() {
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    assert_eq!(harmonic_mean(50.0, 0.0), 0.0);
    assert!((harmonic_mean(60.0, 40.0) - 48.0).abs() < 1e-12);
}

#[test]
fn ties_go_to_lowest_id() {
    let texts = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
    assert_eq!(classify(&[0.0, 0.0], &candidates(&texts)).unwrap(), 0);
    let rev: Vec<(usize, &[f64])> = candidates(&texts).into_iter().rev().collect();
    assert_eq!(classify(&[0.0, 0.0], &rev).unwrap(), 0);
    assert!(classify(&[0.0], &[]).is_err());
}

#[test]
fn fusion_rules() {
    let (a, v) = ([1.0, 2.0], [3.0, 6.0]);
    assert_eq!(FusionRule::Average.fuse(&a, &v), vec![2.0, 4.0]);
    assert_eq!(FusionRule::Audio.fuse(&a, &v), a.to_vec());
}

#[test]
fn report_serializes_with_short_keys() {
    let r = GzslReport { s: 1.0, u: 2.0, hm: 3.0, zsl: 4.0, excluded: vec![] };
    let j = serde_json::to_value(&r).unwrap();
    for k in ["S", "U", "HM", "ZSL"] {
        assert!(j.get(k).is_some(), "missing key {k}");
    }
    assert!(r.to_string().contains("DAAN"));
}

proptest! {
    #[test]
    fn classify_matches_linear_scan(seed in any::<u64>(), n in 1usize..20, dim in 1usize..6) {
        let mut rng = common::rng(seed);
        let texts: Vec<Vec<f64>> = (0..n).map(|_| common::normal_vec(&mut rng, dim, 1.0)).collect();
        let q = common::normal_vec(&mut rng, dim, 1.5);
        prop_assert_eq!(classify(&q, &candidates(&texts)).unwrap(), nearest_scan(&q, &texts));
    }

    #[test]
    fn accuracies_are_percentages(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = common::rng(seed);
        let texts: Vec<Vec<f64>> = (0..5).map(|_| common::normal_vec(&mut rng, 3, 1.0)).collect();
        let queries: Vec<Vec<f64>> = (0..n).map(|_| common::normal_vec(&mut rng, 3, 1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let r = report_from_embeddings(&queries, &labels, &texts, &[true, true, true, false, false]).unwrap();
        for v in [r.s, r.u, r.hm, r.zsl] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert!(r.hm <= r.s.max(r.u) + 1e-12);
        prop_assert!(r.hm >= r.s.min(r.u) - 1e-12 || r.s.min(r.u) == 0.0);
    }
}
