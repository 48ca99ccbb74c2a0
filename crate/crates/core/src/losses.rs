//! Training loss: Lovász-Softmax plus one-vs-rest weighted binary
//! cross-entropy, combined linearly.
//!
//! All functions take pixel-major probabilities (`probs[p * C + c]`) and one
//! class id per pixel, and treat the whole slice as one set of pixels, so a
//! batch is scored jointly by concatenating its pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Class;

/// Probability clamp used by the cross-entropy term.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lovasz_weight: f64,
    pub wbce_weight: f64,
    /// Cross-entropy class weights; `None` derives inverse-frequency weights
    /// from the training partition.
    pub class_weights: Option<[f64; Class::COUNT]>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lovasz_weight: 1.0,
            wbce_weight: 1.0,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lovasz_weight >= 0.0) || !(self.wbce_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lovasz_weight + self.wbce_weight <= 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if let Some(w) = self.class_weights {
            check_class_weights(&w)?;
        }
        Ok(())
    }
}

fn check_class_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!("class weights must be positive, got {w:?}")));
    }
    Ok(())
}

/// Inverse class frequency normalized to mean 1. Counts are smoothed by one
/// so a class missing from the partition still gets a finite weight.
pub fn inverse_frequency_weights(counts: &[usize; Class::COUNT]) -> [f64; Class::COUNT] {
    let total: f64 = counts.iter().map(|&c| c as f64 + 1.0).sum();
    let mut w = [0.0; Class::COUNT];
    for (wi, &c) in w.iter_mut().zip(counts) {
        *wi = total / (c as f64 + 1.0);
    }
    let mean = w.iter().sum::<f64>() / Class::COUNT as f64;
    w.map(|v| v / mean)
}

fn check_shapes(probs: &[f64], targets: &[u8]) -> Result<usize> {
    if targets.is_empty() {
        return Err(Error::Argument("loss over zero pixels".into()));
    }
    if probs.len() != targets.len() * Class::COUNT {
        return Err(Error::Argument(format!(
            "{} probabilities for {} pixels of {} classes",
            probs.len(),
            targets.len(),
            Class::COUNT
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= Class::COUNT) {
        return Err(Error::Argument(format!("target class id {bad} out of range")));
    }
    Ok(targets.len())
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to the
/// errors sorted in decreasing order, given foreground flags in that order.
fn lovasz_jaccard_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut grad = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0f64, 0.0f64);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Integer key with the same order as `f64::total_cmp`.
fn order_key(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Lovász-Softmax loss averaged over the classes present in `targets`, with
/// its gradient with respect to `probs`.
pub fn lovasz_softmax_with_grad(probs: &[f64], targets: &[u8]) -> Result<(f64, Vec<f64>)> {
    let n = check_shapes(probs, targets)?;
    let c_count = Class::COUNT;
    let mut grad = vec![0.0; probs.len()];
    let present: Vec<usize> = (0..c_count)
        .filter(|&c| targets.iter().any(|&t| t as usize == c))
        .collect();
    let mut total = 0.0;
    let mut errors = vec![0.0f64; n];
    let mut keyed: Vec<(u64, usize)> = Vec::with_capacity(n);
    let scale = 1.0 / present.len() as f64;
    for &c in &present {
        for (p, e) in errors.iter_mut().enumerate() {
            let fg = targets[p] as usize == c;
            let prob = probs[p * c_count + c];
            *e = if fg { 1.0 - prob } else { prob };
        }
        // Decreasing error, ties by pixel index.
        keyed.clear();
        keyed.extend(errors.iter().enumerate().map(|(p, &e)| (!order_key(e), p)));
        keyed.sort_unstable();
        let order: Vec<usize> = keyed.iter().map(|&(_, p)| p).collect();
        let fg_sorted: Vec<bool> = order.iter().map(|&p| targets[p] as usize == c).collect();
        let jg = lovasz_jaccard_grad(&fg_sorted);
        for (rank, &p) in order.iter().enumerate() {
            total += errors[p] * jg[rank];
            let de_dp = if targets[p] as usize == c { -1.0 } else { 1.0 };
            grad[p * c_count + c] += scale * jg[rank] * de_dp;
        }
    }
    Ok((total * scale, grad))
}

pub fn lovasz_softmax(probs: &[f64], targets: &[u8]) -> Result<f64> {
    lovasz_softmax_with_grad(probs, targets).map(|(l, _)| l)
}

/// Mean over pixels and classes of −w_c·[t·log p + (1−t)·log(1−p)] against
/// one-hot targets, with p clamped to [1e-7, 1 − 1e-7].
pub fn weighted_bce_with_grad(
    probs: &[f64],
    targets: &[u8],
    class_weights: &[f64; Class::COUNT],
) -> Result<(f64, Vec<f64>)> {
    let n = check_shapes(probs, targets)?;
    check_class_weights(class_weights).map_err(|e| Error::Argument(e.to_string()))?;
    let c_count = Class::COUNT;
    let norm = 1.0 / (n * c_count) as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    for p in 0..n {
        let t_class = targets[p] as usize;
        for c in 0..c_count {
            let i = p * c_count + c;
            let raw = probs[i];
            let q = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let inside = raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP;
            let w = class_weights[c];
            if c == t_class {
                total -= w * q.ln();
                if inside {
                    grad[i] = -w / q * norm;
                }
            } else {
                total -= w * (1.0 - q).ln();
                if inside {
                    grad[i] = w / (1.0 - q) * norm;
                }
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn weighted_bce(probs: &[f64], targets: &[u8], class_weights: &[f64; Class::COUNT]) -> Result<f64> {
    weighted_bce_with_grad(probs, targets, class_weights).map(|(l, _)| l)
}

/// Loss value with its two components, and the gradient w.r.t. `probs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub lovasz: f64,
    pub wbce: f64,
    pub grad: Vec<f64>,
}

pub fn combined_loss_with_grad(
    probs: &[f64],
    targets: &[u8],
    config: &LossConfig,
    class_weights: &[f64; Class::COUNT],
) -> Result<LossOutput> {
    config.validate()?;
    let (lovasz, g_l) = lovasz_softmax_with_grad(probs, targets)?;
    let (wbce, g_b) = weighted_bce_with_grad(probs, targets, class_weights)?;
    let (a, b) = (config.lovasz_weight, config.wbce_weight);
    let grad = g_l.iter().zip(&g_b).map(|(x, y)| a * x + b * y).collect();
    Ok(LossOutput {
        total: a * lovasz + b * wbce,
        lovasz,
        wbce,
        grad,
    })
}

/// Combined loss; class weights come from the config or default to 1.
pub fn combined_loss(probs: &[f64], targets: &[u8], config: &LossConfig) -> Result<f64> {
    let weights = config.class_weights.unwrap_or([1.0; Class::COUNT]);
    combined_loss_with_grad(probs, targets, config, &weights).map(|o| o.total)
}

/// Pixel-major softmax of logits.
pub fn softmax_pixels(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    for px in out.chunks_exact_mut(Class::COUNT) {
        let max = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in px.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        px.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Chains a probability gradient through the softmax:
/// dz_k = p_k · (dp_k − Σ_j p_j dp_j).
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for ((p, g), o) in probs
        .chunks_exact(Class::COUNT)
        .zip(dprobs.chunks_exact(Class::COUNT))
        .zip(out.chunks_exact_mut(Class::COUNT))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..Class::COUNT {
            o[k] = p[k] * (g[k] - dot);
        }
    }
    out
}
