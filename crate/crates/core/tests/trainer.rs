use lvtq_core::phantom::{generate_cohort_with, CohortTemplate, VtDistribution};
use lvtq_core::preprocess::PreprocessConfig;
use lvtq_core::segnet::{NetConfig, UNet};
use lvtq_core::stats::MeanStd;
use lvtq_core::trainer::{
    evaluate_population, evaluate_studies, fit, fold_summary, train_cv, ClassDice, FoldResult, SUMMARY_FILE,
};
use lvtq_core::{PatientStudy, Population};

fn tiny_config() -> lvtq_core::trainer::TrainConfig {
    lvtq_core::trainer::TrainConfig {
        folds: 2,
        epochs: 2,
        batch_size: 4,
        learning_rate: 3e-3,
        net: NetConfig { input_size: 64, depth: 3, base_channels: 4, channel_cap: 32, ..Default::default() },
        preprocess: PreprocessConfig { target_size: 64, ..Default::default() },
        ..Default::default()
    }
}

fn cohort(n: usize, seed: u64) -> Vec<PatientStudy> {
    let template = CohortTemplate { image_size: 64, slices: (1, 3), ..Default::default() };
    let dist = VtDistribution::Bimodal { low_mode: 15.0, high_mode: 38.0, std: 5.0, weight_high: 0.5 };
    generate_cohort_with(&template, n, &dist, seed).unwrap()
}

fn param_values(net: &UNet) -> Vec<Vec<f32>> {
    net.params().iter().map(|p| p.value.clone()).collect()
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let studies = cohort(3, 1);
    let refs: Vec<&PatientStudy> = studies.iter().collect();
    let config = lvtq_core::trainer::TrainConfig { epochs: 1, learning_rate: 0.0, ..tiny_config() };
    let mut net = UNet::new(config.net).unwrap();
    let before = param_values(&net);
    fit(&mut net, &refs[..2], &refs[2..], &config, 0).unwrap();
    assert_eq!(param_values(&net), before);
}

#[test]
fn same_seed_same_curve() {
    let studies = cohort(3, 2);
    let refs: Vec<&PatientStudy> = studies.iter().collect();
    let config = tiny_config();
    let run = || {
        let mut net = UNet::new(config.net).unwrap();
        let (curve, best) = fit(&mut net, &refs[..2], &refs[2..], &config, 0).unwrap();
        (curve, best, param_values(&net))
    };
    assert_eq!(run(), run());
}

#[test]
fn two_folds_on_two_patients() {
    let studies = cohort(2, 3);
    let dir = tempfile::tempdir().unwrap();
    let report = train_cv(&studies, &tiny_config(), dir.path(), false).unwrap();
    assert_eq!(report.folds.len(), 2);
    assert_eq!(report.diagnosis.total(), 2);
    assert!(dir.path().join(SUMMARY_FILE).exists());
    for f in &report.folds {
        assert_eq!(f.predictions.len(), 1);
        assert!(f.checkpoint.exists());
    }
}

#[test]
fn fold_std_is_the_sample_std() {
    let fold = |i: usize, d: ClassDice| FoldResult {
        fold: i,
        checkpoint: "x".into(),
        loss_curve: vec![],
        best_epoch: 1,
        test_dice: d,
        slice_dice: vec![],
        predictions: vec![],
    };
    let folds = vec![
        fold(0, ClassDice::new(0.80, 0.90, 0.70)),
        fold(1, ClassDice::new(0.84, 0.94, 0.60)),
        fold(2, ClassDice::new(0.86, 0.92, 0.65)),
    ];
    let s = fold_summary(&folds);
    let cel = s.cel.unwrap();
    let mean = (0.80 + 0.84 + 0.86) / 3.0;
    let var = ((0.80f64 - mean).powi(2) + (0.84f64 - mean).powi(2) + (0.86f64 - mean).powi(2)) / 2.0;
    assert!((cel.mean - mean).abs() < 1e-12);
    assert!((cel.std - var.sqrt()).abs() < 1e-12);
    let tz = s.tz.unwrap();
    assert!((tz.std - MeanStd::of(&[0.70, 0.60, 0.65]).unwrap().std).abs() < 1e-12);
    assert!((tz.std - 0.05).abs() < 1e-12);
}

#[test]
fn empty_population_is_an_argument_error() {
    let studies = cohort(2, 4);
    let mut net = UNet::new(tiny_config().net).unwrap();
    let err = evaluate_population(&mut net, &studies, Some(Population::H), 27.4).unwrap_err();
    assert!(matches!(err, lvtq_core::Error::Argument(_)));
}

#[test]
fn training_dice_is_at_least_held_out_dice() {
    let template = CohortTemplate { image_size: 64, slices: (3, 3), ..Default::default() };
    let dist = VtDistribution::Uniform { low: 10.0, high: 40.0 };
    let studies = generate_cohort_with(&template, 8, &dist, 5).unwrap();
    let refs: Vec<&PatientStudy> = studies.iter().collect();
    let config = lvtq_core::trainer::TrainConfig {
        epochs: 30,
        batch_size: 2,
        net: NetConfig { base_channels: 8, ..tiny_config().net },
        ..tiny_config()
    };
    let mut net = UNet::new(config.net).unwrap();
    fit(&mut net, &refs[..5], &refs[5..6], &config, 0).unwrap();
    let train = evaluate_studies(&mut net, &refs[..5], 27.4, 4).unwrap().pooled;
    let held_out = evaluate_studies(&mut net, &refs[6..], 27.4, 4).unwrap().pooled;
    assert!(train.average >= held_out.average, "{train:?} vs {held_out:?}");
    assert!(train.average > 0.5, "{train:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let studies = cohort(2, 6);
    let dir = tempfile::tempdir().unwrap();
    let one_fold = lvtq_core::trainer::TrainConfig { folds: 1, ..tiny_config() };
    assert!(matches!(train_cv(&studies, &one_fold, dir.path(), false), Err(lvtq_core::Error::Config(_))));
    let mismatch = lvtq_core::trainer::TrainConfig {
        preprocess: PreprocessConfig { target_size: 128, ..Default::default() },
        ..tiny_config()
    };
    assert!(matches!(mismatch.validate(), Err(lvtq_core::Error::Config(_))));
    let three = lvtq_core::trainer::TrainConfig { folds: 3, ..tiny_config() };
    assert!(train_cv(&studies, &three, dir.path(), false).is_err());
}
