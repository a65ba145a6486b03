//! Algebraic properties of the evaluation metrics.

use proptest::prelude::*;
use wpgd_core::metrics::{
    accuracy_gap, gap_metric_correlation, pearson, robustness_score, robustness_score_normalized, ConfusionMatrix,
};
use wpgd_core::CostMatrix;

fn toy_cost() -> CostMatrix {
    CostMatrix::new(
        &[
            vec![0.0, 10.0, 0.01],
            vec![10.0, 0.0, 1.0],
            vec![0.01, 1.0, 0.0],
        ],
        1.0,
    )
    .unwrap()
}

fn confusion_from(counts: &[u64]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(3);
    for (idx, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            m.record(idx / 3, idx % 3);
        }
    }
    m
}

proptest! {
    #[test]
    fn score_is_linear(m1 in prop::collection::vec(0.0f64..1.0, 9), m2 in prop::collection::vec(0.0f64..1.0, 9), alpha in 0.0f64..1.0) {
        let c = toy_cost();
        let mix: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let lhs = robustness_score_normalized(&mix, &c).unwrap();
        let rhs = alpha * robustness_score_normalized(&m1, &c).unwrap()
            + (1.0 - alpha) * robustness_score_normalized(&m2, &c).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn gap_entries_lie_in_unit_interval(a in prop::collection::vec(0u64..20, 9), b in prop::collection::vec(0u64..20, 9)) {
        let gap = accuracy_gap(&confusion_from(&a), &confusion_from(&b)).unwrap();
        for row in gap.rows() {
            for v in row {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        if let Some(rho) = gap_metric_correlation(&gap, &toy_cost()).unwrap() {
            prop_assert!((-1.0..=1.0).contains(&rho));
        }
    }

    #[test]
    fn pearson_is_bounded(xs in prop::collection::vec(-1e3f64..1e3, 2..30), seed in any::<u64>()) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 60)) & 1) as f64 - i as f64).collect();
        if let Some(r) = pearson(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn self_gap_is_zero_and_correlation_undefined() {
    let m = confusion_from(&[5, 1, 0, 2, 7, 1, 0, 0, 9]);
    let gap = accuracy_gap(&m, &m).unwrap();
    assert!(gap.rows().iter().flatten().all(|&v| v == 0.0));
    assert_eq!(gap_metric_correlation(&gap, &toy_cost()).unwrap(), None);
}

#[test]
fn score_weights_off_diagonal_confusions_by_cost() {
    // rows normalized: row 0 sends 1/2 to class 1, row 2 sends 1/4 to class 0
    let m = confusion_from(&[1, 1, 0, 0, 3, 0, 1, 0, 3]);
    let s = robustness_score(&m, &toy_cost()).unwrap();
    assert!((s - (0.5 * 10.0 + 0.25 * 0.01)).abs() < 1e-12);
}
