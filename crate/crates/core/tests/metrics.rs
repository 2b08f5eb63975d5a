mod common;

use mlrn::labels::DecisionRule;
use mlrn::metrics::{
    ap_from_curve, average_precision, f1, format_metric, mean_average_precision, pr_curve, render_table, table3_report,
    ScoreMatrix, TargetMatrix, TABLE_ROW_LABELS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores on a coarse grid so ties are common and tie-breaking is exercised.
fn instance(seed: u64, n: usize, c: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..n * c).map(|_| f64::from(rng.random_range(0..=levels)) / f64::from(levels)).collect();
    let targets = (0..n * c).map(|_| rng.random_bool(0.4)).collect();
    (scores, targets)
}

fn matrices(scores: &[f64], targets: &[bool], n: usize, c: usize) -> (ScoreMatrix, TargetMatrix) {
    (
        ScoreMatrix::new(n, c, scores.to_vec()).unwrap(),
        TargetMatrix::new(n, c, targets.iter().map(|&t| u8::from(t)).collect()).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn report_matches_counting_oracle(n in 1usize..=20, c in 1usize..=5, levels in 1u32..50, t in 0.0f64..=1.0, seed in any::<u64>()) {
        let (scores, targets) = instance(seed, n, c, levels);
        let (score, target) = matrices(&scores, &targets, n, c);
        let report = table3_report(&score, &target, DecisionRule::Threshold(t)).unwrap();
        let (want, want_ap) = common::aggregates(&scores, &targets, n, c, t);
        let tol = 1e-9;
        prop_assert!(common::close(report.map, want.map, tol));
        for (got, want) in report.per_class_ap.iter().zip(&want_ap) {
            prop_assert!(common::close(*got, *want, tol));
        }
        prop_assert!(common::close(report.op, want.op, tol));
        prop_assert!(common::close(report.cp, want.cp, tol));
        prop_assert!(common::close(report.or_, want.or_, tol));
        prop_assert!(common::close(report.cr, want.cr, tol));
        prop_assert!(common::close(report.of1, want.of1, tol));
        prop_assert!(common::close(report.cf1, want.cf1, tol));
    }

    #[test]
    fn f1_values_are_harmonic_means(n in 1usize..=20, c in 1usize..=5, seed in any::<u64>()) {
        let (scores, targets) = instance(seed, n, c, 100);
        let (score, target) = matrices(&scores, &targets, n, c);
        let r = table3_report(&score, &target, DecisionRule::default()).unwrap();
        if let (Some(p), Some(rc), Some(h)) = (r.op, r.or_, r.of1) {
            prop_assert!((h - f1(p, rc)).abs() <= 1e-12);
        }
        if let (Some(p), Some(rc), Some(h)) = (r.cp, r.cr, r.cf1) {
            prop_assert!((h - f1(p, rc)).abs() <= 1e-12);
        }
        for v in r.headline().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ap_ignores_monotone_rescaling(n in 1usize..=30, seed in any::<u64>()) {
        let (scores, labels) = instance(seed, n, 1, 1024);
        // exact in binary floating point on the 1/1024 grid, strictly increasing on [0, 1]
        let warped: Vec<f64> = scores.iter().map(|s| s * s * 0.5 + 0.25).collect();
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&warped, &labels).unwrap());
    }

    #[test]
    fn pr_curve_is_well_formed(n in 1usize..=30, seed in any::<u64>()) {
        let (scores, labels) = instance(seed, n, 1, 20);
        match pr_curve(&scores, &labels).unwrap() {
            None => prop_assert!(labels.iter().all(|&l| !l)),
            Some(points) => {
                prop_assert_eq!(points.len(), n);
                prop_assert!(points.windows(2).all(|w| w[1].recall >= w[0].recall));
                prop_assert_eq!(points.last().unwrap().recall, 1.0);
                prop_assert!(points.iter().all(|p| (0.0..=1.0).contains(&p.precision)));
                let ap = average_precision(&scores, &labels).unwrap().unwrap();
                prop_assert!((ap - ap_from_curve(&points)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn thousand_instance_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let (n, c) = (rng.random_range(1..=20), rng.random_range(1..=5));
        let (scores, targets) = instance(rng.random(), n, c, 1000);
        let (score, target) = matrices(&scores, &targets, n, c);
        let got = mean_average_precision(&score, &target).unwrap();
        let (want, want_ap) = common::aggregates(&scores, &targets, n, c, 0.5);
        assert!(common::close(got.map, want.map, 1e-9), "case {case}");
        assert_eq!(got.per_class.len(), want_ap.len());
        for (a, b) in got.per_class.iter().zip(&want_ap) {
            assert!(common::close(*a, *b, 1e-9), "case {case}");
        }
    }
}

#[test]
fn hand_ranked_example() {
    let ap = average_precision(&[0.9, 0.7, 0.3], &[true, false, true]).unwrap().unwrap();
    assert!((ap - 5.0 / 6.0).abs() <= 1e-12);
    let curve = pr_curve(&[0.9, 0.7, 0.3], &[true, false, true]).unwrap().unwrap();
    let pairs: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    assert_eq!(pairs, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
    assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap(), Some(1.0));
}

#[test]
fn worst_ranking_finds_first_positive_late() {
    let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
    let labels = [false, false, false, true, true];
    let curve = pr_curve(&scores, &labels).unwrap().unwrap();
    let first = curve.iter().find(|p| p.recall > 0.0).unwrap();
    assert_eq!(first.rank, scores.len() - 2 + 1);
}

#[test]
fn published_precision_recall_pairs_give_published_f1() {
    assert_eq!(format!("{:.3}", f1(0.9947, 0.310)), "0.473");
    assert_eq!(format!("{:.3}", f1(0.9927, 0.255)), "0.406");
}

#[test]
fn published_row_renders_in_table_layout() {
    let values = [0.794, 0.9947, 0.9927, 0.310, 0.255, 0.473, 0.406].map(Some);
    let text = render_table(&[("Value", values)]);
    let rendered: Vec<String> = values.iter().map(|v| format_metric(*v)).collect();
    assert_eq!(rendered, ["0.794", "0.9947", "0.9927", "0.310", "0.255", "0.473", "0.406"]);
    for (label, value) in TABLE_ROW_LABELS.iter().zip(&rendered) {
        let line = text.lines().find(|l| l.starts_with(label)).unwrap();
        assert!(line.trim_end().ends_with(value.as_str()), "{line}");
    }
}

#[test]
fn top_k_recalls_at_least_a_strict_threshold() {
    let (scores, targets) = instance(9, 20, 5, 100);
    let (score, target) = matrices(&scores, &targets, 20, 5);
    let topk = table3_report(&score, &target, DecisionRule::TopK(3)).unwrap();
    let strict = table3_report(&score, &target, DecisionRule::Threshold(0.9)).unwrap();
    assert!(topk.or_.unwrap() >= strict.or_.unwrap_or(0.0));
}
