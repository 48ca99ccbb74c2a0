//! Analytic loss gradients against central finite differences, taken with
//! respect to the logits so the softmax chain is covered too.

use lvtq_core::losses::{
    combined_loss_with_grad, lovasz_softmax_with_grad, softmax_backward, softmax_pixels, LossConfig,
};
use lvtq_core::Class;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PIXELS: usize = 64;
const STEP: f64 = 1e-6;

struct Instance {
    logits: Vec<f64>,
    targets: Vec<u8>,
    weights: [f64; Class::COUNT],
}

/// Sorted Lovász errors must be separated by more than the probe step,
/// otherwise the loss has a kink inside the stencil.
fn well_separated(probs: &[f64], targets: &[u8]) -> bool {
    (0..Class::COUNT).all(|c| {
        let mut errs: Vec<f64> = (0..PIXELS)
            .map(|i| ((targets[i] as usize == c) as u8 as f64 - probs[i * Class::COUNT + c]).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        errs.windows(2).all(|w| w[1] - w[0] > 1e-5)
    })
}

fn instances(n: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let logits: Vec<f64> = (0..PIXELS * Class::COUNT).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<u8> = (0..PIXELS).map(|_| rng.random_range(0..4)).collect();
        let weights = std::array::from_fn(|_| rng.random_range(0.2..3.0));
        if well_separated(&softmax_pixels(&logits), &targets) {
            out.push(Instance { logits, targets, weights });
        }
    }
    out
}

fn max_relative_error(f: impl Fn(&[f64]) -> (f64, Vec<f64>), z: &[f64]) -> f64 {
    let (_, analytic) = f(z);
    let mut numeric = vec![0.0; z.len()];
    let mut probe = z.to_vec();
    for i in 0..z.len() {
        probe[i] = z[i] + STEP;
        let up = f(&probe).0;
        probe[i] = z[i] - STEP;
        let down = f(&probe).0;
        probe[i] = z[i];
        numeric[i] = (up - down) / (2.0 * STEP);
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale
}

#[test]
fn lovasz_gradient_matches_finite_differences() {
    for inst in instances(50, 11) {
        let f = |z: &[f64]| {
            let p = softmax_pixels(z);
            let (l, g) = lovasz_softmax_with_grad(&p, &inst.targets).unwrap();
            (l, softmax_backward(&p, &g))
        };
        let err = max_relative_error(f, &inst.logits);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn combined_gradient_matches_finite_differences() {
    let config = LossConfig { lovasz_weight: 0.7, wbce_weight: 1.3, class_weights: None };
    for inst in instances(50, 12) {
        let f = |z: &[f64]| {
            let p = softmax_pixels(z);
            let o = combined_loss_with_grad(&p, &inst.targets, &config, &inst.weights).unwrap();
            (o.total, softmax_backward(&p, &o.grad))
        };
        let err = max_relative_error(f, &inst.logits);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn one_hot_correct_prediction_costs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets: Vec<u8> = (0..PIXELS).map(|_| rng.random_range(0..4)).collect();
    let mut probs = vec![0.0; PIXELS * Class::COUNT];
    for (i, &t) in targets.iter().enumerate() {
        probs[i * Class::COUNT + t as usize] = 1.0;
    }
    let (lovasz, _) = lovasz_softmax_with_grad(&probs, &targets).unwrap();
    assert!(lovasz.abs() < 1e-12);
    let o = combined_loss_with_grad(&probs, &targets, &LossConfig::default(), &[1.0; 4]).unwrap();
    // BCE is evaluated on clamped probabilities
    assert!(o.total.abs() < 1e-6, "{}", o.total);
}
