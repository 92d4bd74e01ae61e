//! Reverse-mode gradients of the full training loss against central finite
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uq_online::dgpa::{DgpaConfig, DgpaModel};
use uq_online::diffnet::Architecture;
use uq_online::stream::{windowize, ShotRecord};

const STEP: f64 = 1e-5;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Random architecture, inputs and targets; every layer kind appears.
pub fn random_case(case: u64) -> (DgpaModel, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
    let blocks = rng.random_range(1..=2);
    let arch = Architecture {
        conv_filters: (0..blocks).map(|_| rng.random_range(2..=4)).collect(),
        dense_units: (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=5)).collect(),
        dropout_rate: 0.2,
        ..Default::default()
    };
    let channels = rng.random_range(1..=3);
    let len = if blocks == 1 { 10 } else { 18 };
    let cfg = DgpaConfig {
        features: rng.random_range(8..=24),
        length_scale: rng.random_range(0.7..2.0),
        penalty_weight: rng.random_range(0.2..1.5),
        pair_cap: 64,
        ..Default::default()
    };
    let mut model = DgpaModel::new(&arch, &cfg, (len, channels), case).unwrap();
    // zero biases put dead units exactly on the relu kink
    for (k, t) in model.params_mut().tensors_mut().into_iter().enumerate() {
        if k % 2 == 1 {
            t.values_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
    }
    let n = rng.random_range(3..=6);
    let raw: Vec<f64> = (0..(len + n) * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..len + n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shot = std::sync::Arc::new(ShotRecord::from_time_major(0, channels, raw, target).unwrap());
    let windows = windowize(&shot, len, 1);
    model.fit_feature_norm(&windows).unwrap();
    model.update_head(&windows).unwrap();
    // move the read-out off the ridge optimum so the mean path is exercised
    for b in model.head_mut().beta_mut() {
        *b += rng.random_range(-0.5..0.5);
    }
    let inputs = windows.iter().map(|w| w.input().to_vec()).collect();
    let targets = windows.iter().map(|w| w.target() + rng.random_range(-0.3..0.3)).collect();
    (model, inputs, targets)
}

fn loss_at(model: &DgpaModel, inputs: &[Vec<f64>], targets: &[f64], seed: u64) -> f64 {
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    model.loss(&refs, targets, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().total
}

/// Largest relative error over every trainable scalar.
pub fn max_gradient_error(case: u64) -> (f64, usize, f64) {
    let (model, inputs, targets) = random_case(case);
    let seed = 77 + case;
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let (parts, grads) = model.loss_and_gradients(&refs, &targets, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let analytic = grads.flat();

    let mut numeric = Vec::with_capacity(analytic.len());
    let n_tensors = model.params().tensors().len();
    for t in 0..=n_tensors {
        let len = if t < n_tensors { model.params().tensors()[t].len() } else { model.head().beta().len() };
        for i in 0..len {
            let mut plus = model.clone();
            let mut minus = model.clone();
            if t < n_tensors {
                plus.params_mut().tensors_mut()[t].values_mut()[i] += STEP;
                minus.params_mut().tensors_mut()[t].values_mut()[i] -= STEP;
            } else {
                plus.head_mut().beta_mut()[i] += STEP;
                minus.head_mut().beta_mut()[i] -= STEP;
            }
            let lp = loss_at(&plus, &inputs, &targets, seed);
            let lm = loss_at(&minus, &inputs, &targets, seed);
            numeric.push((lp - lm) / (2.0 * STEP));
        }
    }
    assert_eq!(numeric.len(), analytic.len());
    let worst = analytic.iter().zip(&numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max);
    (worst, analytic.len(), parts.penalty)
}
