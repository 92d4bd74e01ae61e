//! Distance-aware regression head over the feature network.
//!
//! The hidden vector `h(x)` is standardized with frozen statistics, lifted by
//! random Fourier features `phi = sqrt(2/m) cos(W h + b)` whose inner products
//! approximate an RBF kernel, and read out linearly for the mean. The
//! predictive spread is the Laplace-style quadratic form `phi^T Lambda^-1 phi`
//! over a precision matrix accumulated from the model's recent data, plus a
//! noise floor, scaled by a calibration factor.

use crate::diffnet::{
    adam_step, backward, bilip_gradients, forward_trace, mae_gradient, select_pairs, AdamConfig,
    AdamState, Architecture, LayerSpec, NetworkParams,
};
use crate::error::{Error, Result};
use crate::seed;
use crate::stream::WindowSample;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpaConfig {
    pub features: usize,
    pub length_scale: f64,
    pub ridge: f64,
    pub noise_floor: f64,
    pub penalty_weight: f64,
    pub pair_cap: usize,
}

impl Default for DgpaConfig {
    fn default() -> Self {
        Self {
            features: 512,
            length_scale: 1.0,
            ridge: 1.0,
            noise_floor: 1e-4,
            penalty_weight: 0.1,
            pair_cap: 64,
        }
    }
}

impl DgpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::Config("dgpa.features must be positive".into()));
        }
        for (name, v) in [("length_scale", self.length_scale), ("ridge", self.ridge)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("dgpa.{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_floor >= 0.0) || !(self.penalty_weight >= 0.0) {
            return Err(Error::Config("dgpa.noise_floor and dgpa.penalty_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Frozen random Fourier feature map. `weights` is `features x input_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffProjection {
    weights: Vec<f64>,
    phases: Vec<f64>,
    features: usize,
    input_dim: usize,
    length_scale: f64,
}

impl RffProjection {
    /// Rows of `W` are `N(0, I / length_scale^2)`, phases uniform on `[0, 2 pi)`.
    pub fn sample<R: Rng + ?Sized>(features: usize, input_dim: usize, length_scale: f64, rng: &mut R) -> Result<Self> {
        if features == 0 || input_dim == 0 || !(length_scale > 0.0) {
            return Err(Error::Argument("rff projection needs m >= 1, D >= 1, length scale > 0".into()));
        }
        let normal = Normal::new(0.0, 1.0 / length_scale).map_err(|e| Error::Argument(e.to_string()))?;
        let weights = (0..features * input_dim).map(|_| normal.sample(rng)).collect();
        let phases = (0..features).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
        Ok(Self { weights, phases, features, input_dim, length_scale })
    }

    pub fn from_parts(weights: Vec<f64>, phases: Vec<f64>, input_dim: usize, length_scale: f64) -> Result<Self> {
        let features = phases.len();
        if features == 0 || input_dim == 0 || weights.len() != features * input_dim || !(length_scale > 0.0) {
            return Err(Error::Argument("inconsistent rff projection parts".into()));
        }
        Ok(Self { weights, phases, features, input_dim, length_scale })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    fn amplitude(&self) -> f64 {
        (2.0 / self.features as f64).sqrt()
    }

    /// `sqrt(2/m) cos(W h + b)`.
    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.input_dim {
            return Err(Error::Argument(format!("rff expects dimension {}, got {}", self.input_dim, h.len())));
        }
        let mut out = vec![0.0; self.features];
        self.project_into(h, &mut out, None);
        Ok(out)
    }

    /// Writes `phi` and optionally `d phi / d (W h + b) = -sqrt(2/m) sin(.)`.
    fn project_into(&self, h: &[f64], phi: &mut [f64], mut dphi: Option<&mut [f64]>) {
        let amp = self.amplitude();
        for j in 0..self.features {
            let row = &self.weights[j * self.input_dim..(j + 1) * self.input_dim];
            let z = self.phases[j] + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>();
            match dphi.as_deref_mut() {
                Some(d) => {
                    let (sin, cos) = z.sin_cos();
                    phi[j] = amp * cos;
                    d[j] = -amp * sin;
                }
                None => phi[j] = amp * z.cos(),
            }
        }
    }

    /// `W^T v`, the pullback of a feature-space gradient to `h`.
    fn pullback(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let row = &self.weights[j * self.input_dim..(j + 1) * self.input_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += vj * w;
            }
        }
    }
}

/// Linear read-out and precision matrix over the random features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpHead {
    beta: Vec<f64>,
    /// Row-major `m x m`.
    precision: Vec<f64>,
    ridge: f64,
    #[serde(skip)]
    factor: Option<Vec<f64>>,
}

impl PartialEq for GpHead {
    fn eq(&self, other: &Self) -> bool {
        self.beta == other.beta && self.precision == other.precision && self.ridge == other.ridge
    }
}

impl GpHead {
    pub fn new(features: usize, ridge: f64) -> Self {
        let mut precision = vec![0.0; features * features];
        for i in 0..features {
            precision[i * features + i] = ridge;
        }
        Self { beta: vec![0.0; features], precision, ridge, factor: None }
    }

    pub fn features(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Replaces the precision matrix; the factorization is rebuilt lazily.
    pub fn set_precision(&mut self, precision: Vec<f64>) -> Result<()> {
        let m = self.features();
        if precision.len() != m * m {
            return Err(Error::Argument(format!("precision must be {m}x{m}")));
        }
        self.precision = precision;
        self.factor = None;
        Ok(())
    }

    /// Full refit from a feature matrix (`n x m`, row-major):
    /// `Lambda = ridge I + Phi^T Phi`, `beta = Lambda^-1 Phi^T y`.
    pub fn refit(&mut self, phi: &[f64], targets: &[f64]) -> Result<()> {
        let m = self.features();
        let n = targets.len();
        if phi.len() != n * m {
            return Err(Error::Argument("feature matrix does not match targets".into()));
        }
        let design = DMatrix::from_row_slice(n, m, phi);
        let transposed = design.transpose();
        let mut gram = &transposed * &design;
        for i in 0..m {
            gram[(i, i)] += self.ridge;
        }
        let rhs = &transposed * nalgebra::DVector::from_column_slice(targets);
        // nalgebra is column-major; the gram matrix is symmetric
        self.precision = gram.as_slice().to_vec();
        self.factor = None;
        self.ensure_factor()?;
        let beta = self.solve(rhs.as_slice());
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("ridge solve produced non-finite weights".into()));
        }
        self.beta = beta;
        Ok(())
    }

    /// Cholesky factor of the precision matrix. A failed factorization adds
    /// `ridge * I` and retries.
    pub fn ensure_factor(&mut self) -> Result<()> {
        if self.factor.is_some() {
            return Ok(());
        }
        let m = self.features();
        for attempt in 0..4 {
            let mat = DMatrix::from_row_slice(m, m, &self.precision);
            if let Some(chol) = mat.cholesky() {
                let l = chol.l();
                let mut flat = vec![0.0; m * m];
                for i in 0..m {
                    for j in 0..=i {
                        flat[i * m + j] = l[(i, j)];
                    }
                }
                self.factor = Some(flat);
                return Ok(());
            }
            log::warn!("precision matrix not positive definite (attempt {attempt}); adding ridge");
            for i in 0..m {
                self.precision[i * m + i] += self.ridge;
            }
        }
        Err(Error::Numeric("precision matrix is not positive definite after re-regularization".into()))
    }

    fn factor(&self) -> Result<&[f64]> {
        self.factor.as_deref().ok_or_else(|| Error::Numeric("precision matrix not factorized".into()))
    }

    /// Solves `L z = v` in place.
    fn forward_substitute(l: &[f64], m: usize, z: &mut [f64]) {
        for i in 0..m {
            let row = &l[i * m..i * m + i];
            let s: f64 = row.iter().zip(&z[..i]).map(|(a, b)| a * b).sum();
            z[i] = (z[i] - s) / l[i * m + i];
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let m = self.features();
        let l = self.factor.as_ref().expect("factorized");
        let mut z = rhs.to_vec();
        Self::forward_substitute(l, m, &mut z);
        for i in (0..m).rev() {
            let mut s = z[i];
            for k in i + 1..m {
                s -= l[k * m + i] * z[k];
            }
            z[i] = s / l[i * m + i];
        }
        z
    }

    /// `phi^T Lambda^-1 phi`.
    pub fn epistemic_variance(&self, phi: &[f64]) -> Result<f64> {
        let m = self.features();
        let l = self.factor()?;
        let mut z = phi.to_vec();
        Self::forward_substitute(l, m, &mut z);
        Ok(z.iter().map(|v| v * v).sum())
    }

    pub fn mean(&self, phi: &[f64]) -> f64 {
        self.beta.iter().zip(phi).map(|(b, p)| b * p).sum()
    }
}

/// Per-dimension standardization of the hidden vector, frozen after
/// pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        h.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScale {
    pub alpha: f64,
}

impl Default for CalibrationScale {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    /// Calibrated standard deviation.
    pub sigma: f64,
    /// Standard deviation before the calibration scale.
    pub raw_sigma: f64,
}

/// Composite training loss on one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mae: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Gradients for every trainable tensor: the network and the read-out.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub network: NetworkParams,
    pub beta: Vec<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.network.tensors().iter().flat_map(|t| t.values().iter().copied()).collect();
        out.extend_from_slice(&self.beta);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpaModel {
    specs: Vec<LayerSpec>,
    input_shape: (usize, usize),
    params: NetworkParams,
    norm: FeatureNorm,
    projection: RffProjection,
    head: GpHead,
    calibration: CalibrationScale,
    noise_floor: f64,
    penalty_weight: f64,
    pair_cap: usize,
    seed: u64,
}

impl DgpaModel {
    pub fn new(arch: &Architecture, config: &DgpaConfig, input_shape: (usize, usize), seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = arch.layer_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::INIT]));
        let params = NetworkParams::init(&specs, input_shape, &mut rng)?;
        let dim = crate::diffnet::output_dim(&specs, input_shape)?;
        let projection = RffProjection::sample(config.features, dim, config.length_scale, &mut rng)?;
        Self::from_parts(specs, input_shape, params, projection, config, seed)
    }

    pub fn from_parts(
        specs: Vec<LayerSpec>,
        input_shape: (usize, usize),
        params: NetworkParams,
        projection: RffProjection,
        config: &DgpaConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        params.check_against(&specs, input_shape)?;
        let dim = crate::diffnet::output_dim(&specs, input_shape)?;
        if dim != projection.input_dim() {
            return Err(Error::Config(format!(
                "feature network width {dim} does not match rff input dimension {}",
                projection.input_dim()
            )));
        }
        let mut head = GpHead::new(projection.features(), config.ridge);
        head.ensure_factor()?;
        Ok(Self {
            specs,
            input_shape,
            params,
            norm: FeatureNorm::identity(dim),
            projection,
            head,
            calibration: CalibrationScale::default(),
            noise_floor: config.noise_floor,
            penalty_weight: config.penalty_weight,
            pair_cap: config.pair_cap,
            seed,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn projection(&self) -> &RffProjection {
        &self.projection
    }

    pub fn head(&self) -> &GpHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut GpHead {
        &mut self.head
    }

    pub fn feature_norm(&self) -> &FeatureNorm {
        &self.norm
    }

    pub fn alpha(&self) -> f64 {
        self.calibration.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("calibration scale must be positive, got {alpha}")));
        }
        self.calibration.alpha = alpha;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_floor(&self) -> f64 {
        self.noise_floor
    }

    pub fn penalty_weight(&self) -> f64 {
        self.penalty_weight
    }

    pub fn set_penalty_weight(&mut self, w: f64) {
        self.penalty_weight = w;
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let n = self.input_shape.0 * self.input_shape.1;
        if x.len() != n {
            return Err(Error::Argument(format!("model expects {n} input values, got {}", x.len())));
        }
        Ok(())
    }

    /// Hidden vector `h(x)` in inference mode.
    pub fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        // inference never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward_trace(&self.params, &self.specs, x, self.input_shape, false, &mut rng)?;
        Ok(trace.activations.into_iter().last().unwrap())
    }

    /// Random features of the standardized hidden vector.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.norm.apply(&self.hidden(x)?);
        self.projection.project(&h)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let phi = self.features(x)?;
        let mean = self.head.mean(&phi);
        let var = self.head.epistemic_variance(&phi)? + self.noise_floor;
        let raw_sigma = var.sqrt();
        let sigma = self.calibration.alpha * raw_sigma;
        if !(mean.is_finite() && sigma.is_finite()) {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        Ok(Prediction { mean, sigma, raw_sigma })
    }

    pub fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<Prediction>> {
        windows.iter().map(|w| self.predict(w.input())).collect()
    }

    /// Refits the normalization statistics from a sample set.
    pub fn fit_feature_norm(&mut self, windows: &[WindowSample]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::Argument("cannot fit feature statistics on no samples".into()));
        }
        let dim = self.projection.input_dim();
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for w in windows {
            let h = self.hidden(w.input())?;
            for k in 0..dim {
                sum[k] += h[k];
                sq[k] += h[k] * h[k];
            }
        }
        let n = windows.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-6 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        self.norm = FeatureNorm { mean, scale };
        Ok(())
    }

    /// Rebuilds the precision matrix and read-out from `windows` with the
    /// current feature network.
    pub fn update_head(&mut self, windows: &[WindowSample]) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::Argument("head update needs at least one sample".into()));
        }
        let m = self.projection.features();
        let mut phi = Vec::with_capacity(windows.len() * m);
        let mut targets = Vec::with_capacity(windows.len());
        for w in windows {
            phi.extend(self.features(w.input())?);
            targets.push(w.target());
        }
        self.head.refit(&phi, &targets)
    }

    pub fn trainable_lengths(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self.params.tensors().iter().map(|t| t.len()).collect();
        lens.push(self.head.features());
        lens
    }

    pub fn new_optimizer(&self, config: AdamConfig) -> AdamState {
        AdamState::new(config, &self.trainable_lengths())
    }

    /// MAE of the mean path plus the weighted bi-Lipschitz penalty on the
    /// hidden map, and its exact gradients. Pairs are drawn first, then one
    /// dropout mask per sample, all from `rng`.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        inputs: &[&[f64]],
        targets: &[f64],
        rng: &mut R,
    ) -> Result<(LossParts, Gradients)> {
        self.composite(inputs, targets, rng, true)
    }

    /// Same loss as [`Self::loss_and_gradients`] without the reverse pass.
    pub fn loss<R: Rng + ?Sized>(&self, inputs: &[&[f64]], targets: &[f64], rng: &mut R) -> Result<LossParts> {
        Ok(self.composite(inputs, targets, rng, false)?.0)
    }

    fn composite<R: Rng + ?Sized>(
        &self,
        inputs: &[&[f64]],
        targets: &[f64],
        rng: &mut R,
        with_grad: bool,
    ) -> Result<(LossParts, Gradients)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Argument("minibatch inputs and targets must be non-empty and aligned".into()));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let n = inputs.len();
        let m = self.projection.features();
        let dim = self.projection.input_dim();
        let pairs = if self.penalty_weight > 0.0 { select_pairs(n, self.pair_cap, rng) } else { Vec::new() };

        let mut traces = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        let mut dphis = Vec::with_capacity(n);
        let mut phis = Vec::with_capacity(n);
        for x in inputs {
            let trace = forward_trace(&self.params, &self.specs, x, self.input_shape, true, rng)?;
            let z = self.norm.apply(trace.output());
            let mut phi = vec![0.0; m];
            let mut dphi = vec![0.0; m];
            self.projection.project_into(&z, &mut phi, Some(&mut dphi));
            preds.push(self.head.mean(&phi));
            phis.push(phi);
            dphis.push(dphi);
            traces.push(trace);
        }
        let mae = crate::diffnet::mae_loss(&preds, targets)?;
        let hidden: Vec<&[f64]> = traces.iter().map(|t| t.output()).collect();
        let (penalty, pen_grads) = bilip_gradients(inputs, &hidden, &pairs);
        let total = mae + self.penalty_weight * penalty;
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite training loss".into()));
        }
        let parts = LossParts { mae, penalty, total };

        let mut grads = Gradients { network: self.params.zeros_like(), beta: vec![0.0; m] };
        if !with_grad {
            return Ok((parts, grads));
        }
        let d_pred = mae_gradient(&preds, targets)?;
        let mut d_feat = vec![0.0; m];
        let mut d_z = vec![0.0; dim];
        for i in 0..n {
            for j in 0..m {
                grads.beta[j] += d_pred[i] * phis[i][j];
                d_feat[j] = d_pred[i] * self.head.beta()[j] * dphis[i][j];
            }
            self.projection.pullback(&d_feat, &mut d_z);
            let d_h: Vec<f64> = d_z
                .iter()
                .zip(&self.norm.scale)
                .zip(&pen_grads[i])
                .map(|((g, s), p)| g / s + self.penalty_weight * p)
                .collect();
            backward(&self.params, &self.specs, &traces[i], &d_h, &mut grads.network)?;
        }
        Ok((parts, grads))
    }

    /// One gradient step on a minibatch.
    pub fn train_batch<R: Rng + ?Sized>(
        &mut self,
        inputs: &[&[f64]],
        targets: &[f64],
        optimizer: &mut AdamState,
        rng: &mut R,
    ) -> Result<LossParts> {
        let (parts, grads) = self.loss_and_gradients(inputs, targets, rng)?;
        let grad_tensors = grads.network.tensors();
        let mut grad_slices: Vec<&[f64]> = grad_tensors.iter().map(|t| t.values()).collect();
        grad_slices.push(&grads.beta);
        let beta = &mut self.head.beta;
        let mut param_slices: Vec<&mut [f64]> = self.params.tensors_mut().into_iter().map(|t| t.values_mut()).collect();
        param_slices.push(beta.as_mut_slice());
        adam_step(&mut param_slices, &grad_slices, optimizer)?;
        Ok(parts)
    }

    /// One shuffled pass over `windows` in minibatches; returns the mean
    /// composite loss.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        windows: &[WindowSample],
        batch_size: usize,
        optimizer: &mut AdamState,
        rng: &mut R,
    ) -> Result<f64> {
        if windows.is_empty() {
            return Ok(0.0);
        }
        let batch_size = batch_size.max(1);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| windows[i].input()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| windows[i].target()).collect();
            total += self.train_batch(&inputs, &targets, optimizer, rng)?.total * chunk.len() as f64;
        }
        Ok(total / windows.len() as f64)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut model: Self = serde_json::from_slice(bytes)?;
        model.params.check_against(&model.specs, model.input_shape)?;
        model.head.ensure_factor()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }
}
