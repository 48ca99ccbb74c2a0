//! Patient-level cross-validation training, model selection and held-out
//! evaluation.
//!
//! Dice is reported two ways. Fold-level Dice pools every test pixel of a
//! fold into one overlap per class, and the CV summary is mean ± std of those
//! per-fold values. Slice-level Dice is one value per slice (slices where a
//! class is absent from both masks are skipped), summarized as mean ± std
//! over slices.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folds::{make_folds, DatasetSplit};
use crate::losses::{combined_loss_with_grad, inverse_frequency_weights, softmax_backward, LossConfig};
use crate::metrics::{confusion, dice_with, ConfusionMatrix, EmptyDice};
use crate::model::{Class, LabelMask, PatientStudy, Population};
use crate::nn::{Mode, Tensor};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::preprocess::{prepare_slice, resize_mask, PreprocessConfig};
use crate::quantify::{quantify_masks, QuantificationResult, DEFAULT_THRESHOLD};
use crate::segnet::{NetConfig, UNet};
use crate::stats::MeanStd;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FOLD_RESULT_FILE: &str = "fold_result.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    /// Epochs without a validation improvement before stopping; 0 disables
    /// early stopping.
    pub early_stopping_patience: usize,
    pub seed: u64,
    /// Balance LVNC labels across folds.
    pub stratify: bool,
    /// Apply random augmentation to training slices.
    pub augment: bool,
    /// VT% cut-off for the held-out diagnoses.
    pub threshold: f64,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            folds: 5,
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            early_stopping_patience: 15,
            seed: 0,
            stratify: true,
            augment: true,
            threshold: DEFAULT_THRESHOLD,
            net: NetConfig::default(),
            loss: LossConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        self.optimizer.validate()?;
        self.net.validate()?;
        self.loss.validate()?;
        self.preprocess.validate(self.net.depth)?;
        if self.preprocess.target_size != self.net.input_size {
            return Err(Error::Config(format!(
                "preprocess target size {} differs from network input size {}",
                self.preprocess.target_size, self.net.input_size
            )));
        }
        Ok(())
    }
}

/// Dice for the three foreground classes and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub cel: f64,
    pub lvc: f64,
    pub tz: f64,
    pub average: f64,
}

impl ClassDice {
    pub fn new(cel: f64, lvc: f64, tz: f64) -> Self {
        ClassDice {
            cel,
            lvc,
            tz,
            average: (cel + lvc + tz) / 3.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cel, self.lvc, self.tz, self.average]
    }
}

/// Mean ± std per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub cel: Option<MeanStd>,
    pub lvc: Option<MeanStd>,
    pub tz: Option<MeanStd>,
    pub average: Option<MeanStd>,
}

impl DiceSummary {
    pub fn rows(&self) -> [(&'static str, Option<MeanStd>); 4] {
        [("CEL", self.cel), ("LVC", self.lvc), ("TZ", self.tz), ("Average", self.average)]
    }

    /// Four-row table: one row per class and the average.
    pub fn table(&self, decimals: usize) -> String {
        let mut out = String::new();
        for (name, v) in self.rows() {
            let cell = v.map_or_else(|| "n/a".to_string(), |m| m.display(decimals));
            out.push_str(&format!("Dice {name:<8}{cell}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceDice {
    pub patient_id: String,
    pub slice_index: usize,
    /// CEL, LVC, TZ; `None` when the class is absent from both masks.
    pub dice: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub population: Population,
    pub reference_vt_percent: f64,
    pub predicted_vt_percent: f64,
    pub reference_diagnosis: bool,
    pub predicted_diagnosis: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub loss_curve: Vec<EpochLoss>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    /// Pooled over all test pixels of the fold.
    pub test_dice: ClassDice,
    pub slice_dice: Vec<SliceDice>,
    pub predictions: Vec<PatientPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub split: DatasetSplit,
    pub folds: Vec<FoldResult>,
    /// Mean ± std of the per-fold pooled Dice.
    pub fold_level: DiceSummary,
    /// Mean ± std over every held-out slice.
    pub slice_level: DiceSummary,
    pub diagnosis: ConfusionMatrix,
    pub diagnosis_accuracy: Option<f64>,
}

/// A network-ready slice.
struct Sample {
    image: Vec<f32>,
    mask: Vec<u8>,
}

fn study_map(cohort: &[PatientStudy]) -> std::collections::HashMap<&str, &PatientStudy> {
    cohort.iter().map(|s| (s.patient_id.as_str(), s)).collect()
}

fn resolve<'a>(
    map: &std::collections::HashMap<&'a str, &'a PatientStudy>,
    ids: &[String],
) -> Result<Vec<&'a PatientStudy>> {
    ids.iter()
        .map(|id| {
            map.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Argument(format!("patient {id} is in the split but not the cohort")))
        })
        .collect()
}

/// Every slice of `studies`, with its augmentation seed when augmenting.
fn slices_of<'a>(studies: &[&'a PatientStudy]) -> Result<Vec<(&'a PatientStudy, usize)>> {
    let mut out = Vec::new();
    for s in studies {
        for (i, sl) in s.slices.iter().enumerate() {
            if sl.mask.is_none() {
                return Err(Error::Argument(format!(
                    "{}: slice {i} has no reference mask",
                    s.patient_id
                )));
            }
            out.push((*s, i));
        }
    }
    Ok(out)
}

fn make_sample(study: &PatientStudy, slice: usize, config: &PreprocessConfig, seed: Option<u64>) -> Result<Sample> {
    let sl = &study.slices[slice];
    let (img, mask) = prepare_slice(&sl.image, sl.mask.as_ref(), config, seed)?;
    Ok(Sample {
        image: img.into_vec(),
        mask: mask.expect("training slices carry masks").labels().to_vec(),
    })
}

fn batch_tensor(samples: &[&Sample], size: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    Tensor::from_vec(samples.len(), 1, size, size, data)
}

/// NCHW logits to pixel-major softmax probabilities.
fn pixel_probs(logits: &Tensor) -> Vec<f64> {
    let (c, hw) = (logits.c, logits.plane());
    let mut probs = Vec::with_capacity(logits.data.len());
    for i in 0..logits.n {
        let img = logits.image(i);
        for p in 0..hw {
            let max = (0..c).map(|k| img[k * hw + p] as f64).fold(f64::NEG_INFINITY, f64::max);
            let start = probs.len();
            let mut sum = 0.0;
            for k in 0..c {
                let e = (img[k * hw + p] as f64 - max).exp();
                probs.push(e);
                sum += e;
            }
            probs[start..].iter_mut().for_each(|v| *v /= sum);
        }
    }
    probs
}

fn to_nchw(pixel_major: &[f64], like: &Tensor) -> Tensor {
    let (c, hw) = (like.c, like.plane());
    let mut out = Tensor::zeros(like.n, c, like.h, like.w);
    for i in 0..like.n {
        let img = out.image_mut(i);
        for p in 0..hw {
            for k in 0..c {
                img[k * hw + p] = pixel_major[(i * hw + p) * c + k] as f32;
            }
        }
    }
    out
}

fn targets_of(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.mask.iter().copied()).collect()
}

/// Mean loss over `samples` with the network in evaluation mode.
fn evaluate_loss(
    net: &mut UNet,
    samples: &[Sample],
    config: &TrainConfig,
    weights: &[f64; Class::COUNT],
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let size = config.net.input_size;
    let mut total = 0.0;
    for chunk in samples.chunks(config.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = net.forward_logits(&batch_tensor(&refs, size), Mode::Eval)?;
        let probs = pixel_probs(&logits);
        let out = combined_loss_with_grad(&probs, &targets_of(&refs), &config.loss, weights)?;
        total += out.total * chunk.len() as f64;
    }
    Ok(Some(total / samples.len() as f64))
}

/// Mixes seed components into one stream seed.
fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Trains `net` on the given studies and returns the weights with the lowest
/// validation loss (training loss when there is no validation set), the
/// per-epoch curve and the selected epoch.
pub fn fit(
    net: &mut UNet,
    train: &[&PatientStudy],
    validation: &[&PatientStudy],
    config: &TrainConfig,
    stream: u64,
) -> Result<(Vec<EpochLoss>, usize)> {
    config.validate()?;
    if net.config() != &config.net {
        return Err(Error::Config("network does not match the training configuration".into()));
    }
    let train_slices = slices_of(train)?;
    if train_slices.is_empty() {
        return Err(Error::Config("training partition has no slices".into()));
    }
    let size = config.net.input_size;
    let plain = PreprocessConfig {
        augmentation: crate::preprocess::AugmentConfig::disabled(),
        ..config.preprocess
    };
    let base: Vec<Sample> = train_slices
        .iter()
        .map(|&(s, i)| make_sample(s, i, &plain, None))
        .collect::<Result<_>>()?;
    let val: Vec<Sample> = slices_of(validation)?
        .iter()
        .map(|&(s, i)| make_sample(s, i, &plain, None))
        .collect::<Result<_>>()?;

    let weights = config.loss.class_weights.unwrap_or_else(|| {
        let mut counts = [0usize; Class::COUNT];
        for s in &base {
            for &l in &s.mask {
                counts[l as usize] += 1;
            }
        }
        inverse_frequency_weights(&counts)
    });

    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, UNet)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..base.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, stream, epoch as u64]));
        order.shuffle(&mut rng);
        let augmented: Option<Vec<Sample>> = if config.augment {
            Some(
                order
                    .iter()
                    .map(|&k| {
                        let (s, i) = train_slices[k];
                        let seed = derive_seed(&[config.seed, stream, epoch as u64, k as u64, 1]);
                        make_sample(s, i, &config.preprocess, Some(seed))
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let epoch_samples: Vec<&Sample> = match &augmented {
            Some(a) => a.iter().collect(),
            None => order.iter().map(|&k| &base[k]).collect(),
        };

        let mut train_total = 0.0;
        for batch in epoch_samples.chunks(config.batch_size) {
            net.zero_grad();
            let logits = net.forward_logits(&batch_tensor(batch, size), Mode::Train)?;
            let probs = pixel_probs(&logits);
            let out = combined_loss_with_grad(&probs, &targets_of(batch), &config.loss, &weights)?;
            train_total += out.total * batch.len() as f64;
            let dlogits = softmax_backward(&probs, &out.grad);
            net.backward(&to_nchw(&dlogits, &logits));
            optimizer.step(&mut net.params_mut(), config.learning_rate);
        }
        let train_loss = train_total / epoch_samples.len() as f64;
        let validation_loss = evaluate_loss(net, &val, config, &weights)?;
        curve.push(EpochLoss {
            epoch,
            train_loss,
            validation_loss,
        });

        let score = validation_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.early_stopping_patience > 0 && since_best >= config.early_stopping_patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_net) = best.expect("at least one epoch ran");
    *net = best_net;
    Ok((curve, best_epoch))
}

/// Segments every slice of `study`; masks come back at each slice's own
/// resolution.
pub fn predict_masks(net: &mut UNet, study: &PatientStudy, batch_size: usize) -> Result<Vec<LabelMask>> {
    let size = net.config().input_size;
    let config = PreprocessConfig {
        target_size: size,
        augmentation: crate::preprocess::AugmentConfig::disabled(),
        ..PreprocessConfig::default()
    };
    let mut masks = Vec::with_capacity(study.slices.len());
    for chunk in study.slices.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * size * size);
        for sl in chunk {
            let (img, _) = prepare_slice(&sl.image, None, &config, None)?;
            data.extend_from_slice(img.as_slice());
        }
        let out = net.forward(&Tensor::from_vec(chunk.len(), 1, size, size, data))?;
        for (mask, sl) in out.masks.into_iter().zip(chunk) {
            let (w, h) = sl.image.dims();
            masks.push(if (w, h) == mask.dims() { mask } else { resize_mask(&mask, w, h)? });
        }
    }
    Ok(masks)
}

/// Per-class pixel tallies for pooled Dice.
#[derive(Debug, Clone, Copy, Default)]
pub struct PooledDice {
    inter: [u64; 3],
    pred: [u64; 3],
    truth: [u64; 3],
}

impl PooledDice {
    pub fn add(&mut self, pred: &LabelMask, truth: &LabelMask) {
        for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
            for (k, class) in Class::FOREGROUND.iter().enumerate() {
                let (ia, ib) = (a == class.id(), b == class.id());
                self.pred[k] += ia as u64;
                self.truth[k] += ib as u64;
                self.inter[k] += (ia && ib) as u64;
            }
        }
    }

    /// Classes absent from every mask score 1.
    pub fn dice(&self) -> ClassDice {
        let d = |k: usize| {
            let den = self.pred[k] + self.truth[k];
            if den == 0 {
                1.0
            } else {
                2.0 * self.inter[k] as f64 / den as f64
            }
        };
        ClassDice::new(d(0), d(1), d(2))
    }
}

/// Evaluation of a trained network on labelled studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pooled: ClassDice,
    pub slice_dice: Vec<SliceDice>,
    pub predictions: Vec<PatientPrediction>,
}

impl Evaluation {
    pub fn slice_summary(&self) -> DiceSummary {
        slice_summary(&self.slice_dice)
    }
}

pub fn slice_summary(slices: &[SliceDice]) -> DiceSummary {
    let column = |k: usize| -> Option<MeanStd> {
        let v: Vec<f64> = slices.iter().filter_map(|s| s.dice[k]).collect();
        MeanStd::of(&v)
    };
    let averages: Vec<f64> = slices
        .iter()
        .filter_map(|s| {
            let present: Vec<f64> = s.dice.iter().flatten().copied().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect();
    DiceSummary {
        cel: column(0),
        lvc: column(1),
        tz: column(2),
        average: MeanStd::of(&averages),
    }
}

/// Segments, scores and quantifies every study.
pub fn evaluate_studies(
    net: &mut UNet,
    studies: &[&PatientStudy],
    threshold: f64,
    batch_size: usize,
) -> Result<Evaluation> {
    let mut tally = PooledDice::default();
    let mut slice_dice = Vec::new();
    let mut predictions = Vec::with_capacity(studies.len());
    for study in studies {
        let masks = predict_masks(net, study, batch_size)?;
        for (i, (pred, sl)) in masks.iter().zip(&study.slices).enumerate() {
            let truth = sl.mask.as_ref().ok_or_else(|| {
                Error::Argument(format!("{}: slice {i} has no reference mask", study.patient_id))
            })?;
            tally.add(pred, truth);
            let mut dice = [None; 3];
            for (slot, class) in dice.iter_mut().zip(Class::FOREGROUND) {
                *slot = dice_with(pred, truth, class, EmptyDice::Skip)?;
            }
            slice_dice.push(SliceDice {
                patient_id: study.patient_id.clone(),
                slice_index: i,
                dice,
            });
        }
        let predicted = quantify_masks(study, &masks, threshold)?;
        let reference = reference_quantification(study, threshold)?;
        predictions.push(PatientPrediction {
            patient_id: study.patient_id.clone(),
            population: study.population,
            reference_vt_percent: reference.vt_percent,
            predicted_vt_percent: predicted.vt_percent,
            reference_diagnosis: reference.diagnosis,
            predicted_diagnosis: predicted.diagnosis,
        });
    }
    Ok(Evaluation {
        pooled: tally.dice(),
        slice_dice,
        predictions,
    })
}

/// Reference VT% from the study's masks, falling back to the recorded value.
fn reference_quantification(study: &PatientStudy, threshold: f64) -> Result<QuantificationResult> {
    let mut q = crate::quantify::quantify_study(study, threshold)?;
    if let Some(vt) = study.reference_vt_percent {
        q.vt_percent = vt;
        q.diagnosis = crate::quantify::diagnose(vt, threshold);
    }
    Ok(q)
}

fn write_loss_curve(path: &Path, curve: &[EpochLoss], best_epoch: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "train_loss", "validation_loss", "selected"]).map_err(err)?;
    for e in curve {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.8}", e.train_loss),
            e.validation_loss.map_or_else(String::new, |v| format!("{v:.8}")),
            (e.epoch == best_epoch).to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn write_slice_metrics(path: &Path, slices: &[SliceDice]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["patient_id", "slice_index", "dice_cel", "dice_lvc", "dice_tz"]).map_err(err)?;
    for s in slices {
        w.write_record([
            s.patient_id.clone(),
            s.slice_index.to_string(),
            fmt_opt(s.dice[0]),
            fmt_opt(s.dice[1]),
            fmt_opt(s.dice[2]),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_predictions(path: &Path, predictions: &[PatientPrediction]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for p in predictions {
        w.serialize(p).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one fold: fits on its training partition, selects by validation
/// loss, then evaluates the test partition once. Outputs go to `out_dir`.
pub fn train_fold(
    cohort: &[PatientStudy],
    split: &DatasetSplit,
    fold: usize,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<FoldResult> {
    config.validate()?;
    if split.k != config.folds {
        return Err(Error::Config(format!(
            "split has {} folds but the configuration asks for {}",
            split.k, config.folds
        )));
    }
    let part = split.fold(fold)?;
    if part.train.is_empty() || part.test.is_empty() {
        return Err(Error::Config(format!("fold {fold} has an empty train or test partition")));
    }
    let map = study_map(cohort);
    let train = resolve(&map, &part.train)?;
    let validation = resolve(&map, &part.validation)?;
    let test = resolve(&map, &part.test)?;

    let mut net = UNet::new(config.net)?;
    let (loss_curve, best_epoch) = fit(&mut net, &train, &validation, config, fold as u64)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    net.save_weights(&checkpoint)?;
    write_loss_curve(&out_dir.join(LOSS_CURVE_FILE), &loss_curve, best_epoch)?;

    let eval = evaluate_studies(&mut net, &test, config.threshold, config.batch_size)?;
    write_slice_metrics(&out_dir.join(METRICS_FILE), &eval.slice_dice)?;
    write_predictions(&out_dir.join(PREDICTIONS_FILE), &eval.predictions)?;

    let result = FoldResult {
        fold,
        checkpoint,
        loss_curve,
        best_epoch,
        test_dice: eval.pooled,
        slice_dice: eval.slice_dice,
        predictions: eval.predictions,
    };
    write_json(&out_dir.join(FOLD_RESULT_FILE), &result)?;
    Ok(result)
}

pub fn fold_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold_{fold}"))
}

/// Mean ± std across folds of the pooled per-fold Dice.
pub fn fold_summary(folds: &[FoldResult]) -> DiceSummary {
    let col = |k: usize| MeanStd::of(&folds.iter().map(|f| f.test_dice.as_array()[k]).collect::<Vec<_>>());
    DiceSummary {
        cel: col(0),
        lvc: col(1),
        tz: col(2),
        average: col(3),
    }
}

/// Per-fold Dice rows followed by mean and std rows.
pub fn write_summary_csv(path: &Path, folds: &[FoldResult]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["fold", "dice_cel", "dice_lvc", "dice_tz", "dice_average"]).map_err(err)?;
    for f in folds {
        let mut row = vec![f.fold.to_string()];
        row.extend(f.test_dice.as_array().iter().map(|v| format!("{v:.6}")));
        w.write_record(&row).map_err(err)?;
    }
    let summary = fold_summary(folds);
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let mut row = vec![label.to_string()];
        for (_, v) in summary.rows() {
            row.push(v.map_or_else(String::new, |m| {
                format!("{:.6}", if pick == 0 { m.mean } else { m.std })
            }));
        }
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every fold of a fresh split. With `resume`, folds whose result file
/// already exists are loaded instead of retrained; the stored configuration
/// must match.
pub fn train_cv(cohort: &[PatientStudy], config: &TrainConfig, out_dir: &Path, resume: bool) -> Result<CvReport> {
    config.validate()?;
    if cohort.len() < config.folds {
        return Err(Error::Config(format!(
            "{} patients cannot fill {} folds",
            cohort.len(),
            config.folds
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    if resume && config_path.exists() {
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let stored: TrainConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
        if &stored != config {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration",
                out_dir.display()
            )));
        }
    }
    write_json(&config_path, config)?;

    let split = make_folds(cohort, config.folds, config.seed, config.stratify)?;
    write_json(&out_dir.join("split.json"), &split)?;
    let mut folds = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let dir = fold_dir(out_dir, fold);
        let done = dir.join(FOLD_RESULT_FILE);
        if resume && done.exists() && dir.join(CHECKPOINT_FILE).exists() {
            let text = fs::read_to_string(&done).map_err(|e| Error::io(&done, e))?;
            let result: FoldResult =
                serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", done.display())))?;
            folds.push(result);
            continue;
        }
        folds.push(train_fold(cohort, &split, fold, config, &dir)?);
    }
    write_summary_csv(&out_dir.join(SUMMARY_FILE), &folds)?;

    let slices: Vec<SliceDice> = folds.iter().flat_map(|f| f.slice_dice.iter().cloned()).collect();
    let preds: Vec<&PatientPrediction> = folds.iter().flat_map(|f| &f.predictions).collect();
    let predicted: Vec<bool> = preds.iter().map(|p| p.predicted_diagnosis).collect();
    let reference: Vec<bool> = preds.iter().map(|p| p.reference_diagnosis).collect();
    let diagnosis = confusion(&predicted, &reference)?;
    let diagnosis_accuracy = crate::metrics::diagnostic_stats(&diagnosis).accuracy;
    let report = CvReport {
        split,
        fold_level: fold_summary(&folds),
        slice_level: slice_summary(&slices),
        folds,
        diagnosis,
        diagnosis_accuracy,
    };
    fs::write(out_dir.join("report.txt"), report.fold_level.table(4)).map_err(|e| Error::io(out_dir, e))?;
    Ok(report)
}

/// Slice-level Dice of `net` on the patients of one population (all
/// patients when `population` is `None`).
pub fn evaluate_population(
    net: &mut UNet,
    cohort: &[PatientStudy],
    population: Option<Population>,
    threshold: f64,
) -> Result<Evaluation> {
    let subset: Vec<&PatientStudy> = cohort
        .iter()
        .filter(|s| population.is_none_or(|p| s.population == p))
        .collect();
    if subset.is_empty() {
        return Err(Error::Argument(match population {
            Some(p) => format!("no patients of population {p}"),
            None => "no patients to evaluate".into(),
        }));
    }
    evaluate_studies(net, &subset, threshold, 8)
}

/// Loads a checkpoint and evaluates it like [`evaluate_population`].
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    cohort: &[PatientStudy],
    population: Option<Population>,
    threshold: f64,
) -> Result<Evaluation> {
    let mut net = UNet::from_checkpoint(checkpoint)?;
    evaluate_population(&mut net, cohort, population, threshold)
}
