//! Post-training calibration of predictive standard deviations by a single
//! multiplicative scale, chosen to minimize the mean absolute gap between
//! nominal and empirical central-interval coverage.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Nominal central-interval coverage levels.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGrid {
    levels: Vec<f64>,
}

impl Default for CoverageGrid {
    /// `0.01, 0.02, ..., 0.99`.
    fn default() -> Self {
        Self { levels: (1..100).map(|k| k as f64 / 100.0).collect() }
    }
}

impl CoverageGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Argument("coverage grid is empty".into()));
        }
        if levels.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Argument("coverage levels must lie in (0, 1)".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("coverage levels must be strictly increasing".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

/// Predicted means, unscaled predicted standard deviations and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    means: Vec<f64>,
    sigmas: Vec<f64>,
    targets: Vec<f64>,
    /// `|y - mean| / sigma`, ascending.
    sorted_ratios: Vec<f64>,
}

pub const MIN_CALIBRATION_SAMPLES: usize = 10;

impl CalibrationDataset {
    pub fn new(means: Vec<f64>, sigmas: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        let n = means.len();
        if sigmas.len() != n || targets.len() != n {
            return Err(Error::Argument("calibration arrays differ in length".into()));
        }
        if n < MIN_CALIBRATION_SAMPLES {
            return Err(Error::Argument(format!(
                "calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {n}"
            )));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Argument("calibration sigmas must be positive and finite".into()));
        }
        if means.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Argument("calibration means and targets must be finite".into()));
        }
        let mut sorted_ratios: Vec<f64> =
            means.iter().zip(&sigmas).zip(&targets).map(|((m, s), y)| (y - m).abs() / s).collect();
        sorted_ratios.sort_by(f64::total_cmp);
        Ok(Self { means, sigmas, targets, sorted_ratios })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn all_residuals_zero(&self) -> bool {
        self.sorted_ratios.last().is_some_and(|&r| r == 0.0)
    }

    fn coverage_at(&self, half_width: f64) -> f64 {
        let inside = self.sorted_ratios.partition_point(|&r| r <= half_width);
        inside as f64 / self.sorted_ratios.len() as f64
    }
}

// Acklam's rational approximation to the standard normal quantile.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];

fn normal_quantile(q: f64) -> f64 {
    let p_low = 0.02425;
    let x = if q < p_low {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    } else if q <= 1.0 - p_low {
        let r = q - 0.5;
        let s = r * r;
        (((((A[0] * s + A[1]) * s + A[2]) * s + A[3]) * s + A[4]) * s + A[5]) * r
            / (((((B[0] * s + B[1]) * s + B[2]) * s + B[3]) * s + B[4]) * s + 1.0)
    } else {
        let r = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    // one Halley step against the exact CDF
    let e = 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2) - q;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Half-width `z` of the central standard-normal interval holding mass `p`,
/// i.e. the normal quantile at `(1 + p) / 2`.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("coverage level {p} outside (0, 1)")));
    }
    Ok(normal_quantile((1.0 + p) / 2.0).max(0.0))
}

/// Fraction of samples whose residual lies within `z_p * alpha * sigma`.
pub fn empirical_coverage(data: &CalibrationDataset, p: f64, alpha: f64) -> Result<f64> {
    let z = std_normal_quantile(p)?;
    Ok(data.coverage_at(z * alpha))
}

fn grid_quantiles(grid: &CoverageGrid) -> Vec<f64> {
    grid.levels.iter().map(|&p| std_normal_quantile(p).expect("grid levels validated")).collect()
}

fn loss_with(data: &CalibrationDataset, grid: &CoverageGrid, z: &[f64], alpha: f64) -> f64 {
    let total: f64 =
        grid.levels.iter().zip(z).map(|(&p, &zp)| (data.coverage_at(zp * alpha) - p).abs()).sum();
    total / grid.levels.len() as f64
}

/// Mean absolute coverage gap over the grid.
pub fn miscalibration_loss(data: &CalibrationDataset, grid: &CoverageGrid, alpha: f64) -> f64 {
    loss_with(data, grid, &grid_quantiles(grid), alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaFit {
    pub alpha: f64,
    pub loss: f64,
    /// Every residual was zero; the scale is left at 1.
    pub degenerate: bool,
}

const COARSE_POINTS: usize = 41;
const COARSE_LOG10_MIN: f64 = -2.0;
const COARSE_LOG10_MAX: f64 = 2.0;
const REFINE_RELATIVE_WIDTH: f64 = 1e-3;

/// Minimizes [`miscalibration_loss`] over `alpha > 0`: a 41-point log grid
/// on `[1e-2, 1e2]`, then golden-section search in log space over the
/// bracket around the best grid point until its relative width is below
/// 1e-3. The starting scale 1 is always a candidate, so the result never
/// scores worse than it.
pub fn fit_alpha(data: &CalibrationDataset, grid: &CoverageGrid) -> AlphaFit {
    if data.all_residuals_zero() {
        return AlphaFit { alpha: 1.0, loss: 0.0, degenerate: true };
    }
    let z = grid_quantiles(grid);
    let eval = |log_a: f64| loss_with(data, grid, &z, 10f64.powf(log_a));

    let mut best_log = 0.0;
    let mut best_loss = eval(0.0);
    let step = (COARSE_LOG10_MAX - COARSE_LOG10_MIN) / (COARSE_POINTS - 1) as f64;
    let coarse: Vec<f64> = (0..COARSE_POINTS).map(|k| COARSE_LOG10_MIN + step * k as f64).collect();
    let mut best_k = None;
    let mut best_coarse = f64::INFINITY;
    for (k, &la) in coarse.iter().enumerate() {
        let l = eval(la);
        if l < best_coarse {
            best_coarse = l;
            best_k = Some(k);
        }
        if l < best_loss {
            best_loss = l;
            best_log = la;
        }
    }
    let k = best_k.unwrap();
    let mut lo = coarse[k.saturating_sub(1)];
    let mut hi = coarse[(k + 1).min(COARSE_POINTS - 1)];

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let tol = (1.0 + REFINE_RELATIVE_WIDTH).log10();
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    for (x, f) in [(x1, f1), (x2, f2)] {
        if f < best_loss {
            best_loss = f;
            best_log = x;
        }
    }
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = eval(x1);
            if f1 < best_loss {
                best_loss = f1;
                best_log = x1;
            }
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = eval(x2);
            if f2 < best_loss {
                best_loss = f2;
                best_log = x2;
            }
        }
    }
    AlphaFit { alpha: 10f64.powf(best_log), loss: best_loss, degenerate: false }
}

/// Nominal-versus-observed coverage curve and the area between it and the
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub nominal: Vec<f64>,
    pub observed: Vec<f64>,
    /// Trapezoidal integral of `|observed - nominal|` over the grid,
    /// normalized by the grid span; lies in `[0, 0.5]` up to grid resolution.
    pub area: f64,
}

/// Curve on the default 99-level grid.
pub fn miscalibration_area(data: &CalibrationDataset, alpha: f64) -> CalibrationCurve {
    calibration_curve(data, &CoverageGrid::default(), alpha)
}

pub fn calibration_curve(data: &CalibrationDataset, grid: &CoverageGrid, alpha: f64) -> CalibrationCurve {
    let z = grid_quantiles(grid);
    let nominal = grid.levels.clone();
    let observed: Vec<f64> = z.iter().map(|&zp| data.coverage_at(zp * alpha)).collect();
    let gap: Vec<f64> = observed.iter().zip(&nominal).map(|(o, p)| (o - p).abs()).collect();
    let area = if nominal.len() < 2 {
        gap[0]
    } else {
        let integral: f64 =
            (1..nominal.len()).map(|k| 0.5 * (gap[k] + gap[k - 1]) * (nominal[k] - nominal[k - 1])).sum();
        integral / (nominal[nominal.len() - 1] - nominal[0])
    };
    CalibrationCurve { nominal, observed, area }
}

/// Two columns: nominal level, observed coverage.
pub fn write_curve(path: &Path, curve: &CalibrationCurve) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (p, c) in curve.nominal.iter().zip(&curve.observed) {
        writeln!(out, "{p} {c}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// `P(|Z| <= z)` by composite Simpson on the density.
    fn central_mass(z: f64) -> f64 {
        let n = 2000;
        let h = z / n as f64;
        let f = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(0.0) + f(z);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        2.0 * s * h / 3.0
    }

    fn quantile_oracle(p: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if central_mass(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `y = mean + c * sigma * eps`.
    pub(crate) fn gaussian_dataset(n: usize, c: f64, seed: u64) -> CalibrationDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let m = (i as f64 * 0.01).sin();
            let s = 0.5 + (i % 7) as f64 * 0.2;
            let e: f64 = StandardNormal.sample(&mut rng);
            means.push(m);
            sigmas.push(s);
            targets.push(m + c * s * e);
        }
        CalibrationDataset::new(means, sigmas, targets).unwrap()
    }

    #[test]
    fn quantile_matches_cdf_oracle() {
        for &p in &[1e-6, 0.01, 0.2, 0.5, 0.6827, 0.9, 0.95, 0.99, 0.999999] {
            let z = std_normal_quantile(p).unwrap();
            let oracle = quantile_oracle(p);
            assert!((z - oracle).abs() < 1e-6, "p={p}: {z} vs {oracle}");
        }
        assert!((std_normal_quantile(0.6827).unwrap() - 1.0).abs() < 1e-4);
        assert!((std_normal_quantile(0.95).unwrap() - 1.95996).abs() < 1e-5);
        assert!(std_normal_quantile(1e-12).unwrap() < 1e-11);
        assert!(std_normal_quantile(0.0).is_err());
        assert!(std_normal_quantile(1.0).is_err());
    }

    #[test]
    fn coverage_limits() {
        let d = gaussian_dataset(500, 1.0, 1);
        assert_eq!(empirical_coverage(&d, 0.5, 1e12).unwrap(), 1.0);
        assert_eq!(empirical_coverage(&d, 0.5, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn calibrated_data_has_nominal_coverage() {
        let d = gaussian_dataset(10_000, 1.0, 2);
        for p in [0.5, 0.9] {
            let c = empirical_coverage(&d, p, 1.0).unwrap();
            assert!((c - p).abs() < 0.02, "p={p}: {c}");
        }
        let grid = CoverageGrid::default();
        let l1 = miscalibration_loss(&d, &grid, 1.0);
        assert!(l1 < 0.02, "{l1}");
        assert!(miscalibration_loss(&d, &grid, 3.0) > l1);
    }

    #[test]
    fn single_level_exact_coverage_has_zero_loss() {
        // ratios 0.1..1.0; half of them within z(0.5) = 0.6745
        let means = vec![0.0; 10];
        let sigmas = vec![1.0; 10];
        let targets: Vec<f64> = (1..=10).map(|k| if k <= 5 { 0.1 * k as f64 } else { 2.0 }).collect();
        let d = CalibrationDataset::new(means, sigmas, targets).unwrap();
        let grid = CoverageGrid::new(vec![0.5]).unwrap();
        assert_eq!(miscalibration_loss(&d, &grid, 1.0), 0.0);
    }

    #[test]
    fn fit_recovers_noise_scale() {
        let grid = CoverageGrid::default();
        for (c, lo, hi) in [(2.0, 1.8, 2.2), (0.5, 0.45, 0.55), (1.0, 0.9, 1.1)] {
            let d = gaussian_dataset(10_000, c, 3);
            let fit = fit_alpha(&d, &grid);
            assert!(!fit.degenerate);
            assert!(fit.alpha >= lo && fit.alpha <= hi, "c={c}: {}", fit.alpha);
            assert!(fit.loss <= miscalibration_loss(&d, &grid, 1.0));
        }
    }

    #[test]
    fn fit_is_scale_equivariant_on_grid() {
        let grid = CoverageGrid::default();
        let d = gaussian_dataset(10_000, 1.3, 4);
        let c = 10f64.powf(0.2);
        let scaled = CalibrationDataset::new(
            d.means().to_vec(),
            d.sigmas().iter().map(|s| s * c).collect(),
            d.targets().to_vec(),
        )
        .unwrap();
        let a = fit_alpha(&d, &grid).alpha;
        let b = fit_alpha(&scaled, &grid).alpha;
        assert!((a / c / b - 1.0).abs() < 2e-3, "{a} {b}");
    }

    #[test]
    fn zero_residuals_are_degenerate() {
        let d = CalibrationDataset::new(vec![1.0; 12], vec![0.3; 12], vec![1.0; 12]).unwrap();
        let fit = fit_alpha(&d, &CoverageGrid::default());
        assert!(fit.degenerate);
        assert_eq!(fit.alpha, 1.0);
    }

    #[test]
    fn area_of_calibrated_and_saturated_curves() {
        let d = gaussian_dataset(10_000, 1.0, 5);
        let curve = miscalibration_area(&d, 1.0);
        assert_eq!(curve.nominal.len(), 99);
        assert!(curve.area < 0.02, "{}", curve.area);
        // coverage 1 everywhere: mean of (1 - p) over [0.01, 0.99] is 0.5
        assert!((miscalibration_area(&d, 1e12).area - 0.5).abs() < 1e-12);
        // coverage 0 everywhere: mean of p is 0.5
        assert!((miscalibration_area(&d, 1e-12).area - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dataset_validation() {
        assert!(CalibrationDataset::new(vec![0.0; 9], vec![1.0; 9], vec![0.0; 9]).is_err());
        assert!(CalibrationDataset::new(vec![0.0; 10], vec![0.0; 10], vec![0.0; 10]).is_err());
        assert!(CoverageGrid::new(vec![0.5, 0.5]).is_err());
        assert!(CoverageGrid::new(vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn coverage_is_monotone() {
        let d = gaussian_dataset(2_000, 1.0, 6);
        let mut prev = 0.0;
        for k in 1..60 {
            let c = empirical_coverage(&d, 0.7, 0.05 * k as f64).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        let mut prev = 0.0;
        for p in CoverageGrid::default().levels() {
            let c = empirical_coverage(&d, *p, 1.0).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }
}
