use super::{forward_trace, LayerSpec, NetworkParams};
use crate::error::{Error, Result};
use rand::seq::index;
use rand::Rng;

/// Lower distance-distortion bound of the hidden map.
pub const BILIP_LOWER: f64 = 0.75;
/// Upper distance-distortion bound of the hidden map.
pub const BILIP_UPPER: f64 = 1.25;

pub fn mae_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(predictions, targets)?;
    let total: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / predictions.len() as f64)
}

/// Gradient of [`mae_loss`] with respect to the predictions. The subgradient
/// at an exact tie is 0.
pub fn mae_gradient(predictions: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_pair(predictions, targets)?;
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Argument("loss over an empty batch".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "prediction/target length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Unordered index pairs within a batch of `n`: all of them when there are at
/// most `cap`, otherwise `cap` distinct pairs drawn uniformly.
pub fn select_pairs<R: Rng + ?Sized>(n: usize, cap: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if n < 2 || cap == 0 {
        return Vec::new();
    }
    let total = n * (n - 1) / 2;
    let decode = |mut k: usize| {
        // row-major walk over the strict upper triangle
        let mut i = 0;
        let mut row = n - 1;
        while k >= row {
            k -= row;
            i += 1;
            row -= 1;
        }
        (i, i + 1 + k)
    };
    if total <= cap {
        (0..total).map(decode).collect()
    } else {
        let mut picked = index::sample(rng, total, cap).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(decode).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyOutcome {
    pub value: f64,
    pub pairs: usize,
}

impl PenaltyOutcome {
    /// Set when the batch had fewer than two inputs.
    pub fn no_pairs(&self) -> bool {
        self.pairs == 0
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pair_hinge(d_in: f64, d_out: f64) -> (f64, f64) {
    // (penalty, d penalty / d d_out)
    let lower = BILIP_LOWER * d_in - d_out;
    let upper = d_out - BILIP_UPPER * d_in;
    let mut value = 0.0;
    let mut slope = 0.0;
    if lower > 0.0 {
        value += lower;
        slope -= 1.0;
    }
    if upper > 0.0 {
        value += upper;
        slope += 1.0;
    }
    (value, slope)
}

/// Mean two-sided hinge violation over `pairs`, given inputs and their
/// hidden features.
pub fn bilip_penalty_features(
    inputs: &[&[f64]],
    features: &[&[f64]],
    pairs: &[(usize, usize)],
) -> PenaltyOutcome {
    if pairs.is_empty() {
        return PenaltyOutcome { value: 0.0, pairs: 0 };
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| {
            pair_hinge(distance(inputs[i], inputs[j]), distance(features[i], features[j])).0
        })
        .sum();
    PenaltyOutcome { value: total / pairs.len() as f64, pairs: pairs.len() }
}

/// Penalty value and its gradient with respect to every feature vector.
pub fn bilip_gradients(
    inputs: &[&[f64]],
    features: &[&[f64]],
    pairs: &[(usize, usize)],
) -> (f64, Vec<Vec<f64>>) {
    let mut grads: Vec<Vec<f64>> = features.iter().map(|f| vec![0.0; f.len()]).collect();
    if pairs.is_empty() {
        return (0.0, grads);
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for &(i, j) in pairs {
        let d_in = distance(inputs[i], inputs[j]);
        let d_out = distance(features[i], features[j]);
        let (value, slope) = pair_hinge(d_in, d_out);
        total += value;
        if slope == 0.0 || d_out == 0.0 {
            continue;
        }
        let c = scale * slope / d_out;
        for k in 0..features[i].len() {
            let diff = features[i][k] - features[j][k];
            grads[i][k] += c * diff;
            grads[j][k] -= c * diff;
        }
    }
    (total * scale, grads)
}

/// Bi-Lipschitz penalty of the network's hidden map over a batch of windows,
/// evaluated in inference mode.
pub fn bilip_penalty<R: Rng + ?Sized>(
    params: &NetworkParams,
    specs: &[LayerSpec],
    inputs: &[&[f64]],
    input_shape: (usize, usize),
    pair_cap: usize,
    rng: &mut R,
) -> Result<PenaltyOutcome> {
    let pairs = select_pairs(inputs.len(), pair_cap, rng);
    if pairs.is_empty() {
        return Ok(PenaltyOutcome { value: 0.0, pairs: 0 });
    }
    let hidden = inputs
        .iter()
        .map(|x| {
            forward_trace(params, specs, x, input_shape, false, rng)
                .map(|t| t.activations.into_iter().last().unwrap())
        })
        .collect::<Result<Vec<_>>>()?;
    let hidden_refs: Vec<&[f64]> = hidden.iter().map(|h| h.as_slice()).collect();
    Ok(bilip_penalty_features(inputs, &hidden_refs, &pairs))
}
