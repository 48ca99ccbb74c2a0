//! Metrics against direct first-principles computations.

use std::collections::BTreeSet;

use lvtq_core::metrics::{auc, confusion, diagnostic_stats, dice_with, ConfusionMatrix, EmptyDice};
use lvtq_core::{Class, LabelMask};
use proptest::prelude::*;

fn brute_dice(pred: &[u8], truth: &[u8], class: u8) -> Option<f64> {
    let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
    let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
    if p.is_empty() && t.is_empty() {
        return None;
    }
    Some(2.0 * p.intersection(&t).count() as f64 / (p.len() + t.len()) as f64)
}

fn brute_kappa(pred: &[bool], truth: &[bool]) -> Option<f64> {
    let n = pred.len() as f64;
    let agree = pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / n;
    let mut chance = 0.0;
    for label in [false, true] {
        let a = pred.iter().filter(|&&v| v == label).count() as f64 / n;
        let b = truth.iter().filter(|&&v| v == label).count() as f64 / n;
        chance += a * b;
    }
    (chance < 1.0).then(|| (agree - chance) / (1.0 - chance))
}

/// Probability that a random positive outscores a random negative.
fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn mask_pair() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<u8>)> {
    (1usize..7, 1usize..7).prop_flat_map(|(w, h)| {
        (
            Just(w),
            Just(h),
            prop::collection::vec(0u8..4, w * h),
            prop::collection::vec(0u8..4, w * h),
        )
    })
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u8..6, any::<bool>()), 2..25)
        .prop_filter("needs both classes", |v| {
            v.iter().any(|x| x.1) && v.iter().any(|x| !x.1)
        })
        .prop_map(|v| (v.iter().map(|x| x.0 as f64 / 5.0).collect(), v.iter().map(|x| x.1).collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_matches_set_overlap((w, h, a, b) in mask_pair()) {
        let pred = LabelMask::from_vec(w, h, a.clone()).unwrap();
        let truth = LabelMask::from_vec(w, h, b.clone()).unwrap();
        for class in Class::ALL {
            let got = dice_with(&pred, &truth, class, EmptyDice::Skip).unwrap();
            let want = brute_dice(&a, &b, class.id());
            match (got, want) {
                (Some(g), Some(e)) => prop_assert!((g - e).abs() < 1e-9),
                (None, None) => {}
                other => prop_assert!(false, "{other:?}"),
            }
        }
    }

    #[test]
    fn kappa_matches_marginals(v in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
        let pred: Vec<bool> = v.iter().map(|x| x.0).collect();
        let truth: Vec<bool> = v.iter().map(|x| x.1).collect();
        let m = confusion(&pred, &truth).unwrap();
        let got = diagnostic_stats(&m).kappa;
        let want = brute_kappa(&pred, &truth);
        match (got, want) {
            (Some(g), Some(e)) => prop_assert!((g - e).abs() < 1e-9),
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn auc_matches_pair_counting((scores, labels) in labelled_scores()) {
        let got = auc(&scores, &labels).unwrap();
        prop_assert!((got - brute_auc(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn confusion_round_trips(tp in 0u64..30, fp in 0u64..30, fn_ in 0u64..30, tn in 0u64..30) {
        let m = ConfusionMatrix { tp, fp, fn_, tn };
        let (pred, truth) = m.to_pairs();
        prop_assert_eq!(confusion(&pred, &truth).unwrap(), m);
    }
}

#[test]
fn reference_confusion_counts() {
    let m = ConfusionMatrix { tp: 210, fp: 13, fn_: 34, tn: 122 };
    let s = diagnostic_stats(&m);
    for (got, want) in [
        (s.accuracy, 0.876),
        (s.specificity, 0.904),
        (s.kappa, 0.739),
        (s.ppv, 0.942),
        (s.npv, 0.782),
    ] {
        assert!((got.unwrap() - want).abs() <= 0.005, "{got:?} vs {want}");
    }
    assert!((s.sensitivity.unwrap() - 210.0 / 244.0).abs() < 1e-12);
}

#[test]
fn perfect_agreement_is_identity() {
    let labels = [true, false, true, true, false];
    let s = diagnostic_stats(&confusion(&labels, &labels).unwrap());
    for v in [s.accuracy, s.sensitivity, s.specificity, s.ppv, s.npv, s.kappa] {
        assert_eq!(v, Some(1.0));
    }
}
