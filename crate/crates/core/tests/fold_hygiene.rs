use std::collections::BTreeSet;

use lvtq_core::folds::{make_folds_from_labels, FoldInput};
use proptest::prelude::*;

fn cohort() -> impl Strategy<Value = (Vec<FoldInput>, usize)> {
    (prop::collection::vec(any::<bool>(), 2..80), 2usize..8)
        .prop_filter("enough patients", |(v, k)| v.len() >= *k)
        .prop_map(|(labels, k)| {
            let inputs = labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| FoldInput { patient_id: format!("p{i:03}"), label: Some(l) })
                .collect();
            (inputs, k)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn folds_are_disjoint_and_balanced((inputs, k) in cohort(), seed in any::<u64>()) {
        let split = make_folds_from_labels(&inputs, k, seed, true).unwrap();
        split.check().unwrap();
        let all: BTreeSet<&str> = inputs.iter().map(|p| p.patient_id.as_str()).collect();
        let positive: BTreeSet<&str> = inputs
            .iter()
            .filter(|p| p.label == Some(true))
            .map(|p| p.patient_id.as_str())
            .collect();
        let global = positive.len() as f64 / inputs.len() as f64;
        for part in &split.folds {
            let train: BTreeSet<&str> = part.train.iter().map(String::as_str).collect();
            let val: BTreeSet<&str> = part.validation.iter().map(String::as_str).collect();
            let test: BTreeSet<&str> = part.test.iter().map(String::as_str).collect();
            prop_assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
            let union: BTreeSet<&str> = train.union(&val).chain(test.iter()).copied().collect();
            prop_assert_eq!(&union, &all);
            let pos = test.intersection(&positive).count() as f64;
            prop_assert!((pos - global * test.len() as f64).abs() <= 1.0 + 1e-9,
                "fold with {} of {} positive, global fraction {}", pos, test.len(), global);
        }
        let again = make_folds_from_labels(&inputs, k, seed, true).unwrap();
        prop_assert_eq!(split, again);
    }

    #[test]
    fn unstratified_folds_are_disjoint((inputs, k) in cohort(), seed in any::<u64>()) {
        let split = make_folds_from_labels(&inputs, k, seed, false).unwrap();
        split.check().unwrap();
        let sizes: Vec<usize> = split.folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn too_few_patients_is_an_argument_error() {
    let inputs = vec![FoldInput { patient_id: "a".into(), label: Some(true) }];
    assert!(matches!(make_folds_from_labels(&inputs, 2, 0, true), Err(lvtq_core::Error::Argument(_))));
}

#[test]
fn stratifying_needs_labels() {
    let inputs: Vec<FoldInput> = (0..4).map(|i| FoldInput { patient_id: format!("p{i}"), label: None }).collect();
    assert!(make_folds_from_labels(&inputs, 2, 0, true).is_err());
    assert!(make_folds_from_labels(&inputs, 2, 0, false).is_ok());
}
