//! Segmentation overlap and diagnostic statistics.
//!
//! Confusion matrices follow the clinical table layout: rows are the
//! predicted diagnosis, columns the reference diagnosis, LVNC is positive.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Class, LabelMask};

/// How to score a class that is absent from both prediction and reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyDice {
    /// Agreement on absence scores 1.0.
    #[default]
    One,
    /// The slice is left out of the class average.
    Skip,
}

/// Dice overlap 2|P∩T| / (|P|+|T|) for one class; 1.0 when both are empty.
pub fn dice(pred: &LabelMask, target: &LabelMask, class: Class) -> Result<f64> {
    Ok(dice_with(pred, target, class, EmptyDice::One)?.unwrap_or(1.0))
}

pub fn dice_with(
    pred: &LabelMask,
    target: &LabelMask,
    class: Class,
    empty: EmptyDice,
) -> Result<Option<f64>> {
    if pred.dims() != target.dims() {
        return Err(Error::Argument(format!(
            "dice of {}x{} vs {}x{} masks",
            pred.width(),
            pred.height(),
            target.width(),
            target.height()
        )));
    }
    let id = class.id();
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(target.labels()) {
        let (ia, ib) = (a == id, b == id);
        p += ia as usize;
        t += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(match empty {
            EmptyDice::One => Some(1.0),
            EmptyDice::Skip => None,
        });
    }
    Ok(Some(2.0 * inter as f64 / (p + t) as f64))
}

/// Dice for CEL, LVC and TZ, in that order.
pub fn foreground_dice(pred: &LabelMask, target: &LabelMask, empty: EmptyDice) -> Result<[Option<f64>; 3]> {
    let mut out = [None; 3];
    for (slot, class) in out.iter_mut().zip(Class::FOREGROUND) {
        *slot = dice_with(pred, target, class, empty)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn predicted_negative(&self) -> u64 {
        self.fn_ + self.tn
    }

    pub fn reference_positive(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn reference_negative(&self) -> u64 {
        self.fp + self.tn
    }

    /// Expands the counts back into (predicted, reference) label pairs.
    pub fn to_pairs(&self) -> (Vec<bool>, Vec<bool>) {
        let mut pred = Vec::with_capacity(self.total() as usize);
        let mut reference = Vec::with_capacity(self.total() as usize);
        for (n, p, r) in [
            (self.tp, true, true),
            (self.fp, true, false),
            (self.fn_, false, true),
            (self.tn, false, false),
        ] {
            for _ in 0..n {
                pred.push(p);
                reference.push(r);
            }
        }
        (pred, reference)
    }
}

pub fn confusion(predicted: &[bool], reference: &[bool]) -> Result<ConfusionMatrix> {
    if predicted.len() != reference.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} references",
            predicted.len(),
            reference.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &r) in predicted.iter().zip(reference) {
        match (p, r) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

/// `None` marks a statistic whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticStats {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub kappa: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn diagnostic_stats(m: &ConfusionMatrix) -> DiagnosticStats {
    let total = m.total();
    let kappa = if total == 0 {
        None
    } else {
        let n = total as f64;
        let observed = (m.tp + m.tn) as f64 / n;
        let expected = (m.predicted_positive() as f64 * m.reference_positive() as f64
            + m.predicted_negative() as f64 * m.reference_negative() as f64)
            / (n * n);
        (expected < 1.0).then(|| (observed - expected) / (1.0 - expected))
    };
    DiagnosticStats {
        accuracy: ratio(m.tp + m.tn, total),
        sensitivity: ratio(m.tp, m.tp + m.fn_),
        specificity: ratio(m.tn, m.tn + m.fp),
        ppv: ratio(m.tp, m.tp + m.fp),
        npv: ratio(m.tn, m.tn + m.fn_),
        kappa,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum CiMethod {
    None,
    /// Percentile bootstrap over resampled (score, label) pairs.
    Bootstrap { resamples: usize, seed: u64, level: f64 },
}

impl CiMethod {
    pub fn bootstrap(seed: u64) -> Self {
        CiMethod::Bootstrap {
            resamples: 2000,
            seed,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffCriterion {
    /// Maximize sensitivity + specificity - 1.
    #[default]
    Youden,
    /// Minimize the distance to the (0, 1) corner.
    ClosestToCorner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    /// 1 - specificity.
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Unique scores in decreasing order; a case is positive when its score
    /// is at least the threshold.
    pub thresholds: Vec<f64>,
    /// Starts at (0, 0) with an infinite threshold, then one point per entry
    /// of `thresholds`, ending at (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub auc_ci: Option<(f64, f64)>,
    pub optimal_cutoff: f64,
    pub optimal_sensitivity: f64,
    pub optimal_specificity: f64,
}

fn roc_points(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<RocPoint>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut thresholds = Vec::new();
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        sensitivity: 0.0,
        false_positive_rate: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        points.push(RocPoint {
            threshold: t,
            sensitivity: tp as f64 / n_pos,
            false_positive_rate: fp as f64 / n_neg,
        });
    }
    (thresholds, points)
}

fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| {
            (w[1].false_positive_rate - w[0].false_positive_rate)
                * (w[1].sensitivity + w[0].sensitivity)
                / 2.0
        })
        .sum()
}

fn check_roc_input(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Argument(format!("non-finite score {bad}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Argument(
            "ROC analysis needs both positive and negative references".into(),
        ));
    }
    Ok(())
}

/// Area under the ROC curve by the trapezoidal rule.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_roc_input(scores, labels)?;
    Ok(trapezoid(&roc_points(scores, labels).1))
}

pub fn roc_analysis(scores: &[f64], labels: &[bool], ci: CiMethod) -> Result<RocCurve> {
    roc_analysis_with(scores, labels, ci, CutoffCriterion::Youden)
}

pub fn roc_analysis_with(
    scores: &[f64],
    labels: &[bool],
    ci: CiMethod,
    criterion: CutoffCriterion,
) -> Result<RocCurve> {
    check_roc_input(scores, labels)?;
    let (thresholds, points) = roc_points(scores, labels);
    let auc = trapezoid(&points);

    // Points run from high to low threshold; a strict comparison keeps the
    // larger threshold on ties.
    let mut best = &points[1];
    let mut best_value = f64::NEG_INFINITY;
    for p in &points[1..] {
        let value = match criterion {
            CutoffCriterion::Youden => p.sensitivity - p.false_positive_rate,
            CutoffCriterion::ClosestToCorner => {
                -((1.0 - p.sensitivity).powi(2) + p.false_positive_rate.powi(2)).sqrt()
            }
        };
        if value > best_value {
            best_value = value;
            best = p;
        }
    }

    let auc_ci = match ci {
        CiMethod::None => None,
        CiMethod::Bootstrap {
            resamples,
            seed,
            level,
        } => Some(bootstrap_auc_ci(scores, labels, resamples, seed, level)?),
    };

    Ok(RocCurve {
        thresholds,
        auc,
        auc_ci,
        optimal_cutoff: best.threshold,
        optimal_sensitivity: best.sensitivity,
        optimal_specificity: 1.0 - best.false_positive_rate,
        points,
    })
}

/// Percentile bootstrap CI of the AUC. Resample `b` draws from its own
/// ChaCha stream of the master seed, so results do not depend on evaluation
/// order. Resamples that miss a class are redrawn on the same stream.
pub fn bootstrap_auc_ci(
    scores: &[f64],
    labels: &[bool],
    resamples: usize,
    seed: u64,
    level: f64,
) -> Result<(f64, f64)> {
    check_roc_input(scores, labels)?;
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!(
            "bootstrap needs resamples > 0 and level in (0, 1), got {resamples}, {level}"
        )));
    }
    let n = scores.len();
    let mut aucs = Vec::with_capacity(resamples);
    let mut s = vec![0.0; n];
    let mut l = vec![false; n];
    for b in 0..resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        loop {
            for j in 0..n {
                let k = rng.random_range(0..n);
                s[j] = scores[k];
                l[j] = labels[k];
            }
            let pos = l.iter().filter(|&&x| x).count();
            if pos > 0 && pos < n {
                break;
            }
        }
        aucs.push(trapezoid(&roc_points(&s, &l).1));
    }
    aucs.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile(&aucs, alpha), quantile(&aucs, 1.0 - alpha)))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("CSV output: {e}"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

/// Confusion matrix in the clinical table layout, with totals.
pub fn write_confusion_csv<W: Write>(out: W, m: &ConfusionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let rows = [
        ["predicted", "ref_lvnc", "ref_no_lvnc", "total"].map(String::from),
        [
            "LVNC".into(),
            m.tp.to_string(),
            m.fp.to_string(),
            m.predicted_positive().to_string(),
        ],
        [
            "No LVNC".into(),
            m.fn_.to_string(),
            m.tn.to_string(),
            m.predicted_negative().to_string(),
        ],
        [
            "Total".into(),
            m.reference_positive().to_string(),
            m.reference_negative().to_string(),
            m.total().to_string(),
        ],
    ];
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_stats_csv<W: Write>(out: W, label: &str, s: &DiagnosticStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["population", "accuracy", "sensitivity", "specificity", "ppv", "npv", "kappa"])
        .map_err(csv_err)?;
    w.write_record([
        label.to_string(),
        fmt_opt(s.accuracy),
        fmt_opt(s.sensitivity),
        fmt_opt(s.specificity),
        fmt_opt(s.ppv),
        fmt_opt(s.npv),
        fmt_opt(s.kappa),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(csv_err)
}

pub fn write_roc_csv<W: Write>(out: W, roc: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "sensitivity", "false_positive_rate"])
        .map_err(csv_err)?;
    for p in &roc.points {
        w.write_record([
            if p.threshold.is_finite() {
                format!("{}", p.threshold)
            } else {
                "inf".into()
            },
            format!("{:.6}", p.sensitivity),
            format!("{:.6}", p.false_positive_rate),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}
