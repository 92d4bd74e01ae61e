//! Shot records, preprocessing, windowing, splitting and data sources.

mod csv_io;
mod synthetic;

pub use csv_io::{load_shots_csv, write_shots_csv};
pub use synthetic::{generate_synthetic_stream, DriftEvent, DriftKind, SyntheticStreamConfig};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// One discharge: a multichannel input series and the target series.
///
/// Inputs are stored time-major (`len` rows of `channels` values) so that a
/// window over time is one contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub shot_id: i64,
    channels: usize,
    inputs: Vec<f64>,
    target: Vec<f64>,
    standardized: bool,
}

impl ShotRecord {
    /// Builds a record from time-major inputs (`target.len()` rows).
    pub fn from_time_major(shot_id: i64, channels: usize, inputs: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if channels == 0 || inputs.len() != channels * target.len() {
            return Err(Error::Argument(format!(
                "shot {shot_id}: {} input values do not form {} rows of {channels} channels",
                inputs.len(),
                target.len()
            )));
        }
        Ok(Self { shot_id, channels, inputs, target, standardized: false })
    }

    /// Builds a record from per-channel series.
    pub fn from_channels(shot_id: i64, channels: &[Vec<f64>], target: Vec<f64>) -> Result<Self> {
        let len = target.len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Argument(format!("shot {shot_id}: channel lengths differ from target")));
        }
        let mut inputs = Vec::with_capacity(len * channels.len());
        for t in 0..len {
            inputs.extend(channels.iter().map(|c| c[t]));
        }
        Self::from_time_major(shot_id, channels.len(), inputs, target)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn input(&self, t: usize, channel: usize) -> f64 {
        self.inputs[t * self.channels + channel]
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn has_nan(&self) -> bool {
        self.inputs.iter().chain(&self.target).any(|v| v.is_nan())
    }
}

/// A fixed-length input window whose target is the deflection at the
/// window's final step. It borrows the shot's storage.
#[derive(Debug, Clone)]
pub struct WindowSample {
    shot: Arc<ShotRecord>,
    end: usize,
    length: usize,
}

impl WindowSample {
    /// Time-major `(length, channels)` view of the input window.
    pub fn input(&self) -> &[f64] {
        let c = self.shot.channels;
        &self.shot.inputs[(self.end + 1 - self.length) * c..(self.end + 1) * c]
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.length, self.shot.channels)
    }

    pub fn target(&self) -> f64 {
        self.shot.target[self.end]
    }

    /// `(shot_id, end index)`.
    pub fn origin(&self) -> (i64, usize) {
        (self.shot.shot_id, self.end)
    }
}

/// Number of windows of `window_length` at `stride` in a series of `len`.
pub fn window_count(len: usize, window_length: usize, stride: usize) -> usize {
    if window_length == 0 || stride == 0 || len < window_length {
        0
    } else {
        (len - window_length) / stride + 1
    }
}

/// Windows never straddle shots: window `k` covers steps
/// `[k*stride, k*stride + window_length)`.
pub fn windowize(shot: &Arc<ShotRecord>, window_length: usize, stride: usize) -> Vec<WindowSample> {
    let n = window_count(shot.len(), window_length, stride);
    if n == 0 {
        log::warn!(
            "shot {} has {} steps, shorter than the {window_length}-step window; no windows",
            shot.shot_id,
            shot.len()
        );
    }
    (0..n)
        .map(|k| WindowSample { shot: Arc::clone(shot), end: k * stride + window_length - 1, length: window_length })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub kept: usize,
    pub dropped_nan: usize,
    pub dropped_stuck: usize,
}

/// A stuck sensor shows as a near-zero, near-constant target.
pub fn is_stuck(shot: &ShotRecord, threshold: f64) -> bool {
    let n = shot.len() as f64;
    if shot.is_empty() {
        return true;
    }
    let mean = shot.target.iter().sum::<f64>() / n;
    let var = shot.target.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mean_abs = shot.target.iter().map(|v| v.abs()).sum::<f64>() / n;
    var.sqrt() < threshold && mean_abs < threshold
}

/// Drops shots containing NaN anywhere, then shots with a stuck target.
pub fn preprocess(shots: Vec<ShotRecord>, stuck_threshold: f64) -> (Vec<ShotRecord>, PreprocessReport) {
    let mut report = PreprocessReport::default();
    let kept: Vec<ShotRecord> = shots
        .into_iter()
        .filter(|s| {
            if s.has_nan() || s.inputs.iter().chain(&s.target).any(|v| !v.is_finite()) {
                report.dropped_nan += 1;
                false
            } else if is_stuck(s, stuck_threshold) {
                report.dropped_stuck += 1;
                false
            } else {
                true
            }
        })
        .collect();
    report.kept = kept.len();
    (kept, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<ShotRecord>,
    pub val: Vec<ShotRecord>,
    pub test: Vec<ShotRecord>,
}

/// Shot-level random partition. Train and validation sizes are floored,
/// the remainder goes to test; each partition keeps arrival order.
pub fn split(shots: &[ShotRecord], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (r_train + r_val + r_test - 1.0).abs() > 1e-9
    {
        return Err(Error::Argument(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = shots.len();
    if n < 3 {
        return Err(Error::Argument(format!("cannot split {n} shots into three partitions")));
    }
    let n_train = (r_train * n as f64 + 1e-9).floor() as usize;
    let n_val = ((r_val * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| shots[i].clone()).collect::<Vec<_>>()
    };
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

/// Per-channel affine standardization with statistics from a reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardizer {
    pub fn fit(shots: &[ShotRecord]) -> Result<Self> {
        let first = shots.first().ok_or_else(|| Error::Data("no shots to standardize from".into()))?;
        let c = first.channels;
        if shots.iter().any(|s| s.channels != c) {
            return Err(Error::Data("shots have differing channel counts".into()));
        }
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let (mut ts, mut tsq, mut n) = (0.0, 0.0, 0usize);
        for s in shots {
            for row in s.inputs.chunks_exact(c) {
                for (k, v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            for v in &s.target {
                ts += v;
                tsq += v * v;
            }
            n += s.len();
        }
        if n == 0 {
            return Err(Error::Data("no samples to standardize from".into()));
        }
        let nf = n as f64;
        let stat = |s: f64, q: f64| {
            let m = s / nf;
            let sd = (q / nf - m * m).max(0.0).sqrt();
            (m, if sd > 1e-12 { sd } else { 1.0 })
        };
        let (input_mean, input_std) = sum.iter().zip(&sq).map(|(&s, &q)| stat(s, q)).unzip();
        let (target_mean, target_std) = stat(ts, tsq);
        Ok(Self { input_mean, input_std, target_mean, target_std })
    }

    pub fn apply(&self, shot: &ShotRecord) -> Result<ShotRecord> {
        if shot.standardized {
            return Err(Error::Data(format!("shot {} is already standardized", shot.shot_id)));
        }
        let c = shot.channels;
        if c != self.input_mean.len() {
            return Err(Error::Data(format!("shot {} has {c} channels, standardizer has {}", shot.shot_id, self.input_mean.len())));
        }
        let inputs = shot
            .inputs
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.input_mean[i % c]) / self.input_std[i % c])
            .collect();
        let target = shot.target.iter().map(|v| (v - self.target_mean) / self.target_std).collect();
        Ok(ShotRecord { shot_id: shot.shot_id, channels: c, inputs, target, standardized: true })
    }

    pub fn apply_all(&self, shots: &[ShotRecord]) -> Result<Vec<ShotRecord>> {
        shots.iter().map(|s| self.apply(s)).collect()
    }
}

/// Checks that shot ids strictly increase.
pub fn check_order(shots: &[ShotRecord]) -> Result<()> {
    for w in shots.windows(2) {
        if w[1].shot_id <= w[0].shot_id {
            return Err(Error::Sequencing(format!(
                "shot {} follows shot {}",
                w[1].shot_id, w[0].shot_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_shot(id: i64, len: usize) -> ShotRecord {
        let chans: Vec<Vec<f64>> = (0..2).map(|c| (0..len).map(|t| (t * (c + 1)) as f64).collect()).collect();
        let target = (0..len).map(|t| t as f64 * 0.1 + 1.0).collect();
        ShotRecord::from_channels(id, &chans, target).unwrap()
    }

    #[test]
    fn window_counts_match_shot_arithmetic() {
        assert_eq!(window_count(1020, 100, 1), 921);
        assert_eq!(1034 * window_count(1020, 100, 1), 952_314);
        assert_eq!(window_count(100, 100, 1), 1);
        assert_eq!(window_count(99, 100, 1), 0);
    }

    #[test]
    fn windows_end_where_expected() {
        let shot = Arc::new(ramp_shot(3, 101));
        let ws = windowize(&shot, 100, 1);
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].origin(), (3, 99));
        assert_eq!(ws[1].origin(), (3, 100));
        assert_eq!(ws[1].input().len(), 200);
        // first row of window 1 is time step 1
        assert_eq!(ws[1].input()[..2], [1.0, 2.0]);
        assert_eq!(ws[1].target(), shot.target()[100]);
        assert!(windowize(&Arc::new(ramp_shot(4, 50)), 100, 1).is_empty());
    }

    #[test]
    fn preprocess_drops_nan_and_stuck() {
        let clean = ramp_shot(1, 10);
        let mut with_nan = ramp_shot(2, 10);
        with_nan.inputs[7] = f64::NAN;
        let stuck = ShotRecord::from_channels(3, &[vec![1.0; 10]], vec![0.0; 10]).unwrap();
        let (kept, report) = preprocess(vec![clean.clone(), with_nan, stuck], 1e-3);
        assert_eq!(kept, vec![clean]);
        assert_eq!(report, PreprocessReport { kept: 1, dropped_nan: 1, dropped_stuck: 1 });
    }

    #[test]
    fn near_zero_noise_counts_as_stuck_but_offset_does_not() {
        let noisy: Vec<f64> = (0..10).map(|t| if t % 2 == 0 { 1e-4 } else { -1e-4 }).collect();
        let s = ShotRecord::from_channels(1, &[vec![0.0; 10]], noisy).unwrap();
        assert!(is_stuck(&s, 1e-3));
        let offset = ShotRecord::from_channels(2, &[vec![0.0; 10]], vec![0.5; 10]).unwrap();
        assert!(!is_stuck(&offset, 1e-3));
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let shots: Vec<_> = (0..100).map(|i| ramp_shot(i, 3)).collect();
        let s = split(&shots, (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let s = split(&shots[..10], (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert!(split(&shots[..2], (0.7, 0.15, 0.15), 1).is_err());
        assert!(split(&shots, (0.7, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let shots: Vec<_> = (0..40).map(|i| ramp_shot(i, 3)).collect();
        let a = split(&shots, (0.7, 0.15, 0.15), 9).unwrap();
        let b = split(&shots, (0.7, 0.15, 0.15), 9).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<i64> = a.train.iter().chain(&a.val).chain(&a.test).map(|s| s.shot_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
        let c = split(&shots, (0.7, 0.15, 0.15), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn standardizing_twice_is_rejected() {
        let shots = vec![ramp_shot(1, 20), ramp_shot(2, 20)];
        let st = Standardizer::fit(&shots).unwrap();
        let once = st.apply(&shots[0]).unwrap();
        assert!(once.is_standardized());
        assert!(matches!(st.apply(&once), Err(Error::Data(_))));
        let all = st.apply_all(&shots).unwrap();
        let refit = Standardizer::fit(&all).unwrap();
        assert!(refit.input_mean.iter().all(|m| m.abs() < 1e-12));
        assert!((refit.target_std - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn stride_one_covers_each_target_index_once(len in 1usize..300, w in 1usize..120) {
            let shot = Arc::new(ramp_shot(0, len));
            let ends: Vec<usize> = windowize(&shot, w, 1).iter().map(|s| s.origin().1).collect();
            let expected: Vec<usize> = if len >= w { (w - 1..len).collect() } else { vec![] };
            prop_assert_eq!(ends, expected);
        }

        #[test]
        fn preprocess_is_idempotent(nan_at in proptest::collection::vec(proptest::option::of(0usize..30), 1..8)) {
            let shots: Vec<ShotRecord> = nan_at.iter().enumerate().map(|(i, n)| {
                let mut s = ramp_shot(i as i64, 15);
                if let Some(k) = n { s.inputs[*k] = f64::NAN; }
                if i % 3 == 2 { s.target.iter_mut().for_each(|v| *v = 0.0); }
                s
            }).collect();
            let (once, _) = preprocess(shots, 1e-3);
            let (twice, report) = preprocess(once.clone(), 1e-3);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(report.dropped_nan + report.dropped_stuck, 0);
        }
    }
}
