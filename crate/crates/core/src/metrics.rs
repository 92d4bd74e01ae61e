//! Error metrics, regression error characteristic curves and cross-trial
//! summaries.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAPE_FLOOR: f64 = 1e-3;
pub const REC_POINTS: usize = 200;
pub const MOVING_AVERAGE_WINDOW: usize = 20;

fn check_pair(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Argument(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::Argument("metric of an empty sample".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    Ok(preds.iter().zip(targets).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(preds, targets)?;
    Ok(preds.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

/// Percent error with the denominator floored at `floor`.
pub fn mape(preds: &[f64], targets: &[f64], floor: f64) -> Result<f64> {
    check_pair(preds, targets)?;
    let s: f64 = preds.iter().zip(targets).map(|(p, y)| (y - p).abs() / y.abs().max(floor)).sum();
    Ok(100.0 * s / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecCurve {
    pub tolerance: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Area over the curve divided by `eps_max`.
    pub aoc: f64,
}

/// Accuracy at [`REC_POINTS`] evenly spaced tolerances on `[0, eps_max]`.
pub fn rec_curve(abs_errors: &[f64], eps_max: f64) -> Result<RecCurve> {
    if abs_errors.is_empty() {
        return Err(Error::Argument("REC curve of no errors".into()));
    }
    if !(eps_max > 0.0 && eps_max.is_finite()) {
        return Err(Error::Argument(format!("REC range {eps_max} must be positive")));
    }
    let mut sorted = abs_errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let step = eps_max / (REC_POINTS - 1) as f64;
    let tolerance: Vec<f64> = (0..REC_POINTS).map(|k| step * k as f64).collect();
    let accuracy: Vec<f64> =
        tolerance.iter().map(|&e| sorted.partition_point(|&v| v <= e) as f64 / n).collect();
    // trapezoid on the uniform grid, already divided by eps_max
    let area: f64 = (1..REC_POINTS).map(|k| 0.5 * ((1.0 - accuracy[k]) + (1.0 - accuracy[k - 1]))).sum();
    Ok(RecCurve { tolerance, accuracy, aoc: (area / (REC_POINTS - 1) as f64).min(1.0) })
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("percentile of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Trailing mean over the last `min(k, i + 1)` points.
pub fn moving_average(series: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Argument("moving average window must be positive".into()));
    }
    let out = (0..series.len())
        .map(|i| {
            let w = &series[(i + 1).saturating_sub(k)..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect();
    Ok(out)
}

/// Sample Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some(sab / (saa * sbb).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotMetrics {
    pub shot_id: i64,
    pub windows: usize,
    pub mae: f64,
    pub mse: f64,
    pub mape: f64,
    pub mean_sigma: f64,
    pub wall_ms: f64,
}

impl ShotMetrics {
    pub fn compute(shot_id: i64, preds: &[f64], sigmas: &[f64], targets: &[f64], wall_ms: f64) -> Result<Self> {
        if sigmas.len() != preds.len() {
            return Err(Error::Argument("sigma count differs from prediction count".into()));
        }
        Ok(Self {
            shot_id,
            windows: preds.len(),
            mae: mae(preds, targets)?,
            mse: mse(preds, targets)?,
            mape: mape(preds, targets, MAPE_FLOOR)?,
            mean_sigma: sigmas.iter().sum::<f64>() / sigmas.len() as f64,
            wall_ms,
        })
    }
}

/// Per-shot results of one strategy in one trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub shots: Vec<ShotMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, shot: ShotMetrics) {
        self.shots.push(shot);
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn per_shot_mae(&self) -> Vec<f64> {
        self.shots.iter().map(|s| s.mae).collect()
    }

    pub fn per_shot_sigma(&self) -> Vec<f64> {
        self.shots.iter().map(|s| s.mean_sigma).collect()
    }

    fn weighted(&self, f: impl Fn(&ShotMetrics) -> f64) -> Option<f64> {
        let n: usize = self.shots.iter().map(|s| s.windows).sum();
        if n == 0 {
            return None;
        }
        Some(self.shots.iter().map(|s| f(s) * s.windows as f64).sum::<f64>() / n as f64)
    }

    /// Window-count-weighted mean of per-shot MAEs.
    pub fn aggregate_mae(&self) -> Option<f64> {
        self.weighted(|s| s.mae)
    }

    pub fn aggregate_mse(&self) -> Option<f64> {
        self.weighted(|s| s.mse)
    }

    pub fn aggregate_mape(&self) -> Option<f64> {
        self.weighted(|s| s.mape)
    }

    pub fn aggregate_sigma(&self) -> Option<f64> {
        self.weighted(|s| s.mean_sigma)
    }
}

/// Scalar results of one strategy in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub strategy: String,
    pub trial: usize,
    pub mae: f64,
    pub mse: f64,
    pub mape: f64,
    pub mean_sigma: f64,
    pub aoc: Option<f64>,
    pub miscalibration_area: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for one trial.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub trials: usize,
    pub mae: Stat,
    pub mse: Stat,
    pub mape: Stat,
    pub mean_sigma: Stat,
    pub aoc: Option<Stat>,
    pub miscalibration_area: Option<Stat>,
    /// Percent reduction of the mean relative to the baseline strategy.
    pub mae_improvement: Option<f64>,
    pub mse_improvement: Option<f64>,
    pub mape_improvement: Option<f64>,
}

pub fn improvement(baseline: f64, value: f64) -> f64 {
    100.0 * (baseline - value) / baseline
}

/// One row per strategy, in first-appearance order.
pub fn summarize(trials: &[TrialMetrics], baseline: &str) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for t in trials {
        if !order.contains(&t.strategy.as_str()) {
            order.push(&t.strategy);
        }
    }
    let mut rows: Vec<SummaryRow> = order
        .iter()
        .map(|&name| {
            let runs: Vec<&TrialMetrics> = trials.iter().filter(|t| t.strategy == name).collect();
            let col = |f: &dyn Fn(&TrialMetrics) -> f64| Stat::of(&runs.iter().map(|t| f(t)).collect::<Vec<_>>()).unwrap();
            let opt = |f: &dyn Fn(&TrialMetrics) -> Option<f64>| {
                let v: Option<Vec<f64>> = runs.iter().map(|t| f(t)).collect();
                v.and_then(|v| Stat::of(&v))
            };
            SummaryRow {
                strategy: name.to_string(),
                trials: runs.len(),
                mae: col(&|t| t.mae),
                mse: col(&|t| t.mse),
                mape: col(&|t| t.mape),
                mean_sigma: col(&|t| t.mean_sigma),
                aoc: opt(&|t| t.aoc),
                miscalibration_area: opt(&|t| t.miscalibration_area),
                mae_improvement: None,
                mse_improvement: None,
                mape_improvement: None,
            }
        })
        .collect();
    if let Some(base) = rows.iter().find(|r| r.strategy == baseline).cloned() {
        for r in &mut rows {
            r.mae_improvement = Some(improvement(base.mae.mean, r.mae.mean));
            r.mse_improvement = Some(improvement(base.mse.mean, r.mse.mean));
            r.mape_improvement = Some(improvement(base.mape.mean, r.mape.mean));
        }
    }
    rows
}

/// Two columns: tolerance, accuracy.
pub fn write_rec(path: &Path, curve: &RecCurve) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (e, a) in curve.tolerance.iter().zip(&curve.accuracy) {
        writeln!(out, "{e} {a}")?;
    }
    out.flush()?;
    Ok(())
}
