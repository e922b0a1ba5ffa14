mod common;

use common::{brute_metrics, load_report, report_vs_oracle};
use dscls::metrics::{self, compute, confusion, render, ReportStyle, ABLATION_ROWS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<usize>, Vec<usize>) {
    let n = rng.gen_range(1..=60);
    // Skewed draws so some classes are often absent from preds or labels.
    let draw = |rng: &mut ChaCha8Rng| {
        let k = rng.gen_range(0..classes);
        if rng.gen_bool(0.3) {
            0
        } else {
            k
        }
    };
    let labels: Vec<usize> = (0..n).map(|_| draw(rng)).collect();
    let preds = labels
        .iter()
        .map(|&l| if rng.gen_bool(0.6) { l } else { draw(rng) })
        .collect();
    (preds, labels)
}

#[test]
fn agrees_with_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for classes in [2, 3, 5] {
        for _ in 0..1000 {
            let (preds, labels) = random_instance(&mut rng, classes);
            let report = compute(&confusion(&preds, &labels, classes).unwrap()).unwrap();
            let oracle = brute_metrics(&preds, &labels, classes);
            let err = report_vs_oracle(&report, &oracle);
            assert!(err <= 1e-12, "C={classes}: deviation {err:e} on {preds:?} vs {labels:?}");
            assert!((report.micro.precision - report.accuracy).abs() <= 1e-15);
            assert!((report.micro.recall - report.accuracy).abs() <= 1e-15);
            assert!((report.weighted.recall - report.accuracy).abs() <= 1e-15);
            assert!(report.in_unit_range());
        }
    }
}

#[test]
fn zero_division_is_flagged_not_fatal() {
    let report = compute(&confusion(&[0, 0, 0], &[0, 0, 1], 3).unwrap()).unwrap();
    assert!(report.per_class[2].zero_division);
    assert_eq!(report.per_class[2].precision, 0.0);
    assert!(report.per_class[1].zero_division);
    assert!(!report.per_class[0].zero_division);
}

#[test]
fn json_round_trip_keeps_key_order() {
    let report = load_report("validation_report.json");
    let json = render(&report, ReportStyle::Json);
    let keys: Vec<usize> = ["\"accuracy\"", "\"per_class\"", "\"weighted\"", "\"micro\"", "\"macro\"", "\"confusion\""]
        .iter()
        .map(|k| json.find(k).unwrap())
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(metrics::MetricsReport::from_json(&json).unwrap(), report);
}

#[test]
fn ablation_row_labels_in_order() {
    let out = render(&load_report("validation_report.json"), ReportStyle::AblationRow);
    let names: Vec<&str> = out.lines().skip(2).map(|l| l.split(" | ").next().unwrap().trim_start_matches("| ")).collect();
    assert_eq!(names, ABLATION_ROWS);
}

proptest! {
    #[test]
    fn invariant_under_joint_permutation(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50),
        seed in any::<u64>(),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let p2: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = compute(&confusion(&preds, &labels, 4).unwrap()).unwrap();
        let b = compute(&confusion(&p2, &l2, 4).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn all_correct_is_perfect(labels in prop::collection::vec(0usize..3, 1..40)) {
        let r = compute(&confusion(&labels, &labels, 3).unwrap()).unwrap();
        prop_assert_eq!(r.accuracy, 1.0);
        prop_assert_eq!(r.weighted.f1, 1.0);
        prop_assert_eq!(r.micro.f1, 1.0);
    }
}
