//! Prequential online learning over a shot stream.
//!
//! Each incoming shot is first predicted by every member, then appended to
//! every member's rolling buffer; online members then fine-tune on their own
//! buffer, rebuild their head and recalibrate. Members differ only in buffer
//! capacity and training seed.

use crate::calibration::{fit_alpha, CalibrationDataset, CoverageGrid};
use crate::dgpa::{DgpaModel, Prediction};
use crate::diffnet::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ShotMetrics};
use crate::seed;
use crate::stream::{windowize, ShotRecord, WindowSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Static,
    SingleOnline,
    NaiveEnsemble,
    UqEnsemble,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Static, Strategy::SingleOnline, Strategy::NaiveEnsemble, Strategy::UqEnsemble];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::SingleOnline => "single_online",
            Strategy::NaiveEnsemble => "naive_ensemble",
            Strategy::UqEnsemble => "uq_ensemble",
        }
    }

    pub fn is_online(self) -> bool {
        self != Strategy::Static
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Strategy::NaiveEnsemble | Strategy::UqEnsemble)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Argument(format!("unknown strategy {s:?}")))
    }
}

/// Inverse-variance fusion: weights `sigma_i^-2` normalized to one,
/// combined sigma `(sum sigma_i^-2)^-1/2`.
pub fn fuse_uq(preds: &[(f64, f64)]) -> Result<(f64, f64)> {
    check_fusion_input(preds)?;
    if preds.len() == 1 {
        return Ok(preds[0]);
    }
    let precision: Vec<f64> = preds.iter().map(|&(_, s)| 1.0 / (s * s)).collect();
    let total: f64 = precision.iter().sum();
    let mean = preds.iter().zip(&precision).map(|(&(y, _), &p)| (p / total) * y).sum();
    let sigma = 1.0 / total.sqrt();
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Numeric("fused sigma is not positive and finite".into()));
    }
    Ok((mean, sigma))
}

/// Normalized inverse-variance weights.
pub fn uq_weights(sigmas: &[f64]) -> Vec<f64> {
    let precision: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
    let total: f64 = precision.iter().sum();
    precision.iter().map(|p| p / total).collect()
}

/// Unweighted mean; sigma is the root mean square of member sigmas.
pub fn fuse_naive(preds: &[(f64, f64)]) -> Result<(f64, f64)> {
    check_fusion_input(preds)?;
    let n = preds.len() as f64;
    let mean = preds.iter().map(|p| p.0).sum::<f64>() / n;
    let sigma = (preds.iter().map(|p| p.1 * p.1).sum::<f64>() / n).sqrt();
    Ok((mean, sigma))
}

fn check_fusion_input(preds: &[(f64, f64)]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Argument("nothing to fuse".into()));
    }
    for &(y, s) in preds {
        if !(y.is_finite() && s.is_finite()) {
            return Err(Error::Numeric("non-finite member prediction".into()));
        }
        if s <= 0.0 {
            return Err(Error::Argument(format!("member sigma {s} is not positive")));
        }
    }
    Ok(())
}

/// Fusion rule of a strategy; single-member strategies pass through.
pub fn fuse(strategy: Strategy, preds: &[(f64, f64)]) -> Result<(f64, f64)> {
    match strategy {
        Strategy::NaiveEnsemble => fuse_naive(preds),
        _ => fuse_uq(preds),
    }
}

/// FIFO of the most recent shots.
#[derive(Debug, Clone)]
pub struct RollingBuffer {
    capacity: usize,
    shots: VecDeque<Arc<ShotRecord>>,
}

impl RollingBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self { capacity, shots: VecDeque::with_capacity(capacity.min(1024)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    /// Appends, evicting the oldest shot when full.
    pub fn push(&mut self, shot: Arc<ShotRecord>) {
        if self.shots.len() == self.capacity {
            self.shots.pop_front();
        }
        self.shots.push_back(shot);
    }

    pub fn shot_ids(&self) -> Vec<i64> {
        self.shots.iter().map(|s| s.shot_id).collect()
    }

    pub fn shots(&self) -> impl Iterator<Item = &Arc<ShotRecord>> {
        self.shots.iter()
    }

    pub fn windows(&self, window_length: usize, stride: usize) -> Vec<WindowSample> {
        self.shots.iter().flat_map(|s| windowize(s, window_length, stride)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// Buffer capacities (in shots) of the ensemble members.
    pub buffer_schedule: Vec<usize>,
    /// Buffer capacity of the single-model online baseline.
    pub single_buffer: usize,
    pub batch_size: usize,
    pub epochs_per_step: usize,
    pub adam: AdamConfig,
    /// Number of most recent shots whose prequential residuals are used to
    /// recalibrate, independent of buffer capacity.
    pub calibration_shots: usize,
    /// Recalibration is skipped below this many residuals.
    pub calibration_min_windows: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            buffer_schedule: vec![1, 5, 20, 40, 200],
            single_buffer: 5,
            batch_size: 64,
            epochs_per_step: 1,
            adam: AdamConfig::default(),
            calibration_shots: 10,
            calibration_min_windows: 50,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_schedule.is_empty() || self.buffer_schedule.contains(&0) {
            return Err(Error::Config("buffer_schedule must list positive capacities".into()));
        }
        let mut seen = self.buffer_schedule.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.buffer_schedule.len() {
            // capacities key the member seeds
            return Err(Error::Config("buffer_schedule capacities must be distinct".into()));
        }
        if self.single_buffer == 0 || self.batch_size == 0 {
            return Err(Error::Config("single_buffer and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn capacities(&self, strategy: Strategy) -> Vec<usize> {
        match strategy {
            Strategy::Static | Strategy::SingleOnline => vec![self.single_buffer],
            _ => self.buffer_schedule.clone(),
        }
    }
}

/// Residual record of one prequentially predicted shot.
#[derive(Debug, Clone)]
struct ResidualShot {
    means: Vec<f64>,
    raw_sigmas: Vec<f64>,
    targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Member {
    model: DgpaModel,
    buffer: RollingBuffer,
    optimizer: AdamState,
    seed: u64,
    residuals: VecDeque<ResidualShot>,
    sessions: u64,
}

impl Member {
    pub fn model(&self) -> &DgpaModel {
        &self.model
    }

    pub fn buffer(&self) -> &RollingBuffer {
        &self.buffer
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    fn record(&mut self, preds: &[Prediction], targets: &[f64], horizon: usize) {
        self.residuals.push_back(ResidualShot {
            means: preds.iter().map(|p| p.mean).collect(),
            raw_sigmas: preds.iter().map(|p| p.raw_sigma).collect(),
            targets: targets.to_vec(),
        });
        while self.residuals.len() > horizon {
            self.residuals.pop_front();
        }
    }

    /// Fine-tune, head rebuild and recalibration on the current buffer.
    fn train_session(&mut self, config: &OnlineConfig, window_length: usize, stride: usize) -> Result<()> {
        let windows = self.buffer.windows(window_length, stride);
        if windows.is_empty() {
            return Ok(());
        }
        for epoch in 0..config.epochs_per_step {
            let key = seed::derive(self.seed, &[seed::EPOCH, self.sessions, epoch as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            self.model.train_epoch(&windows, config.batch_size, &mut self.optimizer, &mut rng)?;
        }
        self.model.update_head(&windows)?;
        self.recalibrate(config)?;
        Ok(())
    }

    fn recalibrate(&mut self, config: &OnlineConfig) -> Result<()> {
        let n: usize = self.residuals.iter().map(|r| r.targets.len()).sum();
        if n < config.calibration_min_windows.max(crate::calibration::MIN_CALIBRATION_SAMPLES) {
            return Ok(());
        }
        let mut means = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for r in &self.residuals {
            means.extend_from_slice(&r.means);
            sigmas.extend_from_slice(&r.raw_sigmas);
            targets.extend_from_slice(&r.targets);
        }
        let data = CalibrationDataset::new(means, sigmas, targets)?;
        let fit = fit_alpha(&data, &CoverageGrid::default());
        if !fit.degenerate {
            self.model.set_alpha(fit.alpha)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberOutcome {
    pub capacity: usize,
    /// `None` when the member could not predict this shot.
    pub predictions: Option<Vec<Prediction>>,
    /// Set when the training session failed and the member was rolled back.
    pub update_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub shot_id: i64,
    pub members: Vec<MemberOutcome>,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub targets: Vec<f64>,
    pub abs_errors: Vec<f64>,
    /// Wall time of the whole step, predict through recalibration.
    pub wall_ms: f64,
}

impl StepOutcome {
    /// Re-applies a fusion rule to the member predictions of this step.
    pub fn fused_with(&self, strategy: Strategy) -> Result<(Vec<f64>, Vec<f64>)> {
        fuse_members(strategy, &self.members, self.targets.len())
    }

    pub fn metrics(&self, mean: &[f64], sigma: &[f64]) -> Result<ShotMetrics> {
        ShotMetrics::compute(self.shot_id, mean, sigma, &self.targets, self.wall_ms)
    }
}

fn fuse_members(strategy: Strategy, members: &[MemberOutcome], windows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let live: Vec<&Vec<Prediction>> = members.iter().filter_map(|m| m.predictions.as_ref()).collect();
    if live.is_empty() {
        return Err(Error::Numeric("every ensemble member failed to predict".into()));
    }
    let mut mean = Vec::with_capacity(windows);
    let mut sigma = Vec::with_capacity(windows);
    let mut buf = Vec::with_capacity(live.len());
    for w in 0..windows {
        buf.clear();
        buf.extend(live.iter().map(|p| (p[w].mean, p[w].sigma)));
        let (y, s) = fuse(strategy, &buf)?;
        mean.push(y);
        sigma.push(s);
    }
    Ok((mean, sigma))
}

/// Members, strategy and stream cursor.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    strategy: Strategy,
    members: Vec<Member>,
    config: OnlineConfig,
    window_length: usize,
    stride: usize,
    cursor: Option<i64>,
}

impl EnsembleState {
    /// Clones `base` once per capacity of the strategy. Member seeds are
    /// derived from `trial_seed` and the capacity alone, so a given capacity
    /// trains identically in every strategy.
    pub fn new(
        base: &DgpaModel,
        strategy: Strategy,
        config: &OnlineConfig,
        stride: usize,
        trial_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if stride == 0 {
            return Err(Error::Config("window stride must be positive".into()));
        }
        let members = config
            .capacities(strategy)
            .into_iter()
            .map(|cap| {
                Ok(Member {
                    model: base.clone(),
                    buffer: RollingBuffer::new(cap)?,
                    optimizer: base.new_optimizer(config.adam),
                    seed: seed::derive(trial_seed, &[seed::MEMBER, cap as u64]),
                    residuals: VecDeque::new(),
                    sessions: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            strategy,
            members,
            config: config.clone(),
            window_length: base.input_shape().0,
            stride,
            cursor: None,
        })
    }

    /// Seeds every buffer with the tail of `history` (oldest first) and sets
    /// the cursor to its last shot. No training happens.
    pub fn prefill(&mut self, history: &[Arc<ShotRecord>]) -> Result<()> {
        for shot in history {
            self.advance_cursor(shot.shot_id)?;
            for m in &mut self.members {
                m.buffer.push(shot.clone());
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn cursor(&self) -> Option<i64> {
        self.cursor
    }

    fn advance_cursor(&mut self, shot_id: i64) -> Result<()> {
        if let Some(c) = self.cursor {
            if shot_id <= c {
                return Err(Error::Sequencing(format!("shot {shot_id} arrived after shot {c}")));
            }
        }
        self.cursor = Some(shot_id);
        Ok(())
    }

    /// Predict, fuse, ingest, and (for online strategies) train each member.
    pub fn step(&mut self, shot: Arc<ShotRecord>) -> Result<StepOutcome> {
        if let Some(c) = self.cursor {
            if shot.shot_id <= c {
                return Err(Error::Sequencing(format!("shot {} arrived after shot {c}", shot.shot_id)));
            }
        }
        let start = Instant::now();
        let windows = windowize(&shot, self.window_length, self.stride);
        let targets: Vec<f64> = windows.iter().map(|w| w.target()).collect();

        // predictions use only state from before this shot's targets
        let predictions: Vec<Option<Vec<Prediction>>> = self
            .members
            .par_iter()
            .map(|m| match m.model.predict_windows(&windows) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::warn!("member with buffer {} failed to predict shot {}: {e}", m.buffer.capacity(), shot.shot_id);
                    None
                }
            })
            .collect();
        let mut members: Vec<MemberOutcome> = self
            .members
            .iter()
            .zip(predictions)
            .map(|(m, p)| MemberOutcome { capacity: m.buffer.capacity(), predictions: p, update_error: None })
            .collect();
        let (mean, sigma) = if windows.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            fuse_members(self.strategy, &members, windows.len())?
        };

        if self.strategy.is_online() {
            let config = &self.config;
            let (wl, stride) = (self.window_length, self.stride);
            let errors: Vec<Option<String>> = self
                .members
                .par_iter_mut()
                .zip(members.par_iter())
                .map(|(m, out)| {
                    if let Some(p) = &out.predictions {
                        m.record(p, &targets, config.calibration_shots);
                    }
                    m.buffer.push(shot.clone());
                    let snapshot = (m.model.clone(), m.optimizer.clone());
                    let result = m.train_session(config, wl, stride);
                    m.sessions += 1;
                    match result {
                        Ok(()) => None,
                        Err(e) => {
                            (m.model, m.optimizer) = snapshot;
                            log::warn!("member with buffer {} rolled back after shot {}: {e}", m.buffer.capacity(), shot.shot_id);
                            Some(e.to_string())
                        }
                    }
                })
                .collect();
            for (out, err) in members.iter_mut().zip(errors) {
                out.update_error = err;
            }
        } else {
            for m in &mut self.members {
                m.buffer.push(shot.clone());
            }
        }
        self.cursor = Some(shot.shot_id);

        let abs_errors = mean.iter().zip(&targets).map(|(p, y)| (p - y).abs()).collect();
        Ok(StepOutcome {
            shot_id: shot.shot_id,
            members,
            mean,
            sigma,
            targets,
            abs_errors,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Steps through `shots` in order and collects per-shot metrics. Shots that
/// yield no windows are ingested but not scored.
pub fn run_stream(state: &mut EnsembleState, shots: &[Arc<ShotRecord>]) -> Result<(MetricReport, Vec<StepOutcome>)> {
    let mut report = MetricReport::default();
    let mut outcomes = Vec::with_capacity(shots.len());
    for shot in shots {
        let out = state.step(shot.clone())?;
        if !out.targets.is_empty() {
            report.push(out.metrics(&out.mean, &out.sigma)?);
        }
        outcomes.push(out);
    }
    Ok((report, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgpa::DgpaConfig;
    use crate::diffnet::Architecture;
    use super::Strategy;
    use proptest::prelude::*;

    #[test]
    fn fuse_uq_examples() {
        let (y, s) = fuse_uq(&[(0.0, 1.0), (2.0, 1.0)]).unwrap();
        assert_eq!(y, 1.0);
        assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        let (y, s) = fuse_uq(&[(1.0, 1.0), (0.0, 2.0)]).unwrap();
        assert!((y - 0.8).abs() < 1e-15);
        assert!((s - 1.25f64.powf(-0.5)).abs() < 1e-15);
        assert_eq!(uq_weights(&[1.0, 2.0]), vec![0.8, 0.2]);
        assert_eq!(fuse_uq(&[(0.3, 0.7)]).unwrap(), (0.3, 0.7));
    }

    #[test]
    fn fuse_naive_examples() {
        assert_eq!(fuse_naive(&[(0.0, 1.0), (2.0, 9.0)]).unwrap().0, 1.0);
        assert_eq!(fuse_naive(&[(0.4, 0.2), (0.4, 0.2)]).unwrap(), (0.4, 0.2));
        assert!((fuse_naive(&[(0.0, 1.0), (0.0, 2.0)]).unwrap().1 - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fusion_rejects_bad_members() {
        assert!(matches!(fuse_uq(&[(0.0, 0.0)]), Err(Error::Argument(_))));
        assert!(matches!(fuse_uq(&[(0.0, -1.0)]), Err(Error::Argument(_))));
        assert!(matches!(fuse_uq(&[(f64::NAN, 1.0)]), Err(Error::Numeric(_))));
        assert!(matches!(fuse_naive(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("ensemble".parse::<Strategy>().is_err());
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = RollingBuffer::new(3).unwrap();
        for k in 0..7 {
            b.push(Arc::new(ShotRecord::from_time_major(k, 1, vec![0.0], vec![0.0]).unwrap()));
            assert!(b.len() <= 3);
        }
        assert_eq!(b.shot_ids(), vec![4, 5, 6]);
        assert!(RollingBuffer::new(0).is_err());
    }

    proptest! {
        #[test]
        fn uq_fusion_properties(
            members in prop::collection::vec((-3.0f64..3.0, 0.05f64..4.0), 1..7),
            c in 0.1f64..10.0,
            rot in 0usize..7,
        ) {
            let w = uq_weights(&members.iter().map(|m| m.1).collect::<Vec<_>>());
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let (y, s) = fuse_uq(&members).unwrap();
            let min_s = members.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
            prop_assert!(s <= min_s * (1.0 + 1e-12));
            let mut rotated = members.clone();
            rotated.rotate_left(rot % members.len());
            let (y2, s2) = fuse_uq(&rotated).unwrap();
            prop_assert!((y - y2).abs() < 1e-12 && (s - s2).abs() < 1e-12);
            let scaled: Vec<(f64, f64)> = members.iter().map(|&(a, b)| (a, b * c)).collect();
            let (y3, s3) = fuse_uq(&scaled).unwrap();
            prop_assert!((y - y3).abs() < 1e-12);
            prop_assert!((s3 - c * s).abs() < 1e-12 * c.max(1.0));
        }
    }

    fn tiny_shot(id: i64, len: usize, phase: f64) -> Arc<ShotRecord> {
        let inputs: Vec<f64> = (0..len * 2).map(|i| ((i as f64) * 0.37 + phase).sin()).collect();
        let target: Vec<f64> = (0..len).map(|t| ((t as f64) * 0.1 + phase).cos() * 0.5).collect();
        Arc::new(ShotRecord::from_time_major(id, 2, inputs, target).unwrap())
    }

    fn tiny_model() -> DgpaModel {
        let arch = Architecture { conv_filters: vec![3], dense_units: vec![4], ..Default::default() };
        let cfg = DgpaConfig { features: 32, ..Default::default() };
        let mut m = DgpaModel::new(&arch, &cfg, (8, 2), 5).unwrap();
        let w = windowize(&tiny_shot(-1, 40, 0.0), 8, 2);
        m.fit_feature_norm(&w).unwrap();
        m.update_head(&w).unwrap();
        m
    }

    fn tiny_config() -> OnlineConfig {
        OnlineConfig {
            buffer_schedule: vec![1, 3],
            single_buffer: 3,
            calibration_min_windows: 20,
            adam: AdamConfig { learning_rate: 1e-2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn out_of_order_shot_is_rejected() {
        let mut st = EnsembleState::new(&tiny_model(), Strategy::SingleOnline, &tiny_config(), 2, 1).unwrap();
        st.step(tiny_shot(5, 30, 0.1)).unwrap();
        assert!(matches!(st.step(tiny_shot(5, 30, 0.2)), Err(Error::Sequencing(_))));
        assert!(matches!(st.step(tiny_shot(3, 30, 0.2)), Err(Error::Sequencing(_))));
        assert!(st.prefill(&[tiny_shot(4, 30, 0.0)]).is_err());
    }

    #[test]
    fn static_strategy_never_changes() {
        let mut st = EnsembleState::new(&tiny_model(), Strategy::Static, &tiny_config(), 2, 1).unwrap();
        let a = st.step(tiny_shot(1, 30, 0.3)).unwrap();
        let b = st.step(tiny_shot(2, 30, 0.3)).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(st.members()[0].model(), &tiny_model());
    }

    #[test]
    fn capacity_one_holds_latest_shot() {
        let mut st = EnsembleState::new(&tiny_model(), Strategy::UqEnsemble, &tiny_config(), 2, 1).unwrap();
        for k in 1..=4 {
            st.step(tiny_shot(k, 30, k as f64)).unwrap();
            assert_eq!(st.members()[0].buffer().shot_ids(), vec![k]);
        }
        assert_eq!(st.members()[1].buffer().shot_ids(), vec![2, 3, 4]);
    }

    #[test]
    fn prediction_ignores_incoming_targets() {
        let base = tiny_model();
        let mut a = EnsembleState::new(&base, Strategy::UqEnsemble, &tiny_config(), 2, 9).unwrap();
        let mut b = a.clone();
        for k in 1..=3 {
            a.step(tiny_shot(k, 30, k as f64)).unwrap();
            b.step(tiny_shot(k, 30, k as f64)).unwrap();
        }
        let honest = tiny_shot(4, 30, 7.0);
        let mut poisoned = (*honest).clone();
        let sentinel = vec![1e6; honest.len()];
        poisoned = ShotRecord::from_time_major(4, 2, poisoned.inputs().to_vec(), sentinel).unwrap();
        let ra = a.step(honest).unwrap();
        let rb = b.step(Arc::new(poisoned)).unwrap();
        assert_eq!(ra.mean, rb.mean);
        assert_eq!(ra.sigma, rb.sigma);
        assert_ne!(a.members()[0].model(), b.members()[0].model());
    }

    #[test]
    fn one_member_ensemble_matches_single_online() {
        let base = tiny_model();
        let mut cfg = tiny_config();
        cfg.buffer_schedule = vec![3];
        let mut ens = EnsembleState::new(&base, Strategy::UqEnsemble, &cfg, 2, 4).unwrap();
        let mut single = EnsembleState::new(&base, Strategy::SingleOnline, &cfg, 2, 4).unwrap();
        let shots: Vec<_> = (1..=6).map(|k| tiny_shot(k, 30, 0.5 * k as f64)).collect();
        let (mut ra, _) = run_stream(&mut ens, &shots).unwrap();
        let (mut rb, _) = run_stream(&mut single, &shots).unwrap();
        assert_eq!(ra.per_shot_mae(), rb.per_shot_mae());
        for s in ra.shots.iter_mut().chain(rb.shots.iter_mut()) {
            s.wall_ms = 0.0;
        }
        assert_eq!(ra, rb);
    }

    #[test]
    fn naive_refusion_equals_separate_run() {
        let base = tiny_model();
        let cfg = tiny_config();
        let shots: Vec<_> = (1..=4).map(|k| tiny_shot(k, 30, 0.5 * k as f64)).collect();
        let mut uq = EnsembleState::new(&base, Strategy::UqEnsemble, &cfg, 2, 4).unwrap();
        let mut naive = EnsembleState::new(&base, Strategy::NaiveEnsemble, &cfg, 2, 4).unwrap();
        let (_, oa) = run_stream(&mut uq, &shots).unwrap();
        let (_, ob) = run_stream(&mut naive, &shots).unwrap();
        for (a, b) in oa.iter().zip(&ob) {
            let (m, s) = a.fused_with(Strategy::NaiveEnsemble).unwrap();
            assert_eq!(m, b.mean);
            assert_eq!(s, b.sigma);
        }
    }

    #[test]
    fn online_members_adapt_and_recalibrate() {
        let base = tiny_model();
        let mut st = EnsembleState::new(&base, Strategy::SingleOnline, &tiny_config(), 2, 2).unwrap();
        let shots: Vec<_> = (1..=5).map(|k| tiny_shot(k, 30, 2.0)).collect();
        let (report, outcomes) = run_stream(&mut st, &shots).unwrap();
        assert_eq!(report.len(), 5);
        assert!(outcomes.iter().all(|o| o.members[0].update_error.is_none()));
        assert_ne!(st.members()[0].model().alpha(), base.alpha());
        assert!(report.shots[4].mae < report.shots[0].mae);
    }

    #[test]
    fn empty_stream_gives_empty_report() {
        let mut st = EnsembleState::new(&tiny_model(), Strategy::UqEnsemble, &tiny_config(), 2, 1).unwrap();
        let (report, outcomes) = run_stream(&mut st, &[]).unwrap();
        assert!(report.is_empty() && outcomes.is_empty());
    }
}
