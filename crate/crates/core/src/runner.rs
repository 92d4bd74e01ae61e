//! Experiment orchestration: configuration, data preparation, pretraining,
//! multi-trial stream runs and result files.
//!
//! Layout of an output directory:
//!
//! ```text
//! pretrain/base_trial_<k>.json       base model per trial
//! pretrain/training_log_trial_<k>.csv
//! pretrain/pretrain_summary.json
//! trial_<k>/windows_<strategy>.csv   per-window fused predictions
//! trial_<k>/per_shot.csv
//! trial_<k>/checkpoints/             optional member checkpoints
//! per_shot.csv                       all trials
//! summary.json                       cross-trial table
//! rec_<strategy>.txt, calibration_<strategy>.txt
//! manifest.json
//! ```

use crate::calibration::{calibration_curve, fit_alpha, write_curve, CalibrationDataset, CoverageGrid};
use crate::dgpa::{DgpaConfig, DgpaModel};
use crate::diffnet::{AdamConfig, Architecture};
use crate::ensemble::{EnsembleState, OnlineConfig, StepOutcome, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{
    mae, percentile, rec_curve, summarize, write_rec, MetricReport, ShotMetrics, SummaryRow, TrialMetrics,
};
use crate::seed;
use crate::stream::{
    check_order, generate_synthetic_stream, load_shots_csv, preprocess, split, windowize, write_shots_csv,
    PreprocessReport, ShotRecord, Standardizer, SyntheticStreamConfig, WindowSample,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV input; exactly one of `csv` and `synthetic` must be set.
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticStreamConfig>,
    pub window_length: usize,
    pub stride: usize,
    pub stuck_threshold: f64,
    /// Shots with `shot_id < pretrain_end` form the pretraining range.
    pub pretrain_end: i64,
    /// Optional exclusive upper bound on streamed shot ids.
    pub stream_end: Option<i64>,
    pub split: [f64; 3],
    /// Defaults to a derivation of the master seed.
    pub split_seed: Option<u64>,
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            synthetic: None,
            window_length: 100,
            stride: 1,
            stuck_threshold: 1e-3,
            pretrain_end: 0,
            stream_end: None,
            split: [0.7, 0.15, 0.15],
            split_seed: None,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { max_epochs: 100, patience: 5, batch_size: 64, adam: AdamConfig::default() }
    }
}

fn default_trials() -> usize {
    10
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Explicit trial seeds; when empty they derive from `master_seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub threads: usize,
    /// Write measured step times in `wall_ms`; when off the column is 0 so
    /// reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
    /// Save every member every this many stream steps; 0 disables.
    #[serde(default)]
    pub checkpoint_interval: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub network: Architecture,
    #[serde(default)]
    pub dgpa: DgpaConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub online: OnlineConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.trials {
            return Err(Error::Config(format!("{} seeds given for {} trials", self.seeds.len(), self.trials)));
        }
        let d = &self.data;
        if d.csv.is_some() == d.synthetic.is_some() {
            return Err(Error::Config("set exactly one of data.csv and data.synthetic".into()));
        }
        if d.window_length == 0 || d.stride == 0 {
            return Err(Error::Config("data.window_length and data.stride must be positive".into()));
        }
        if let Some(s) = &d.synthetic {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        for l in self.network.layer_specs() {
            l.validate()?;
        }
        self.dgpa.validate()?;
        self.online.validate()?;
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        if self.seeds.is_empty() {
            seed::derive(self.master_seed, &[seed::TRIAL, trial as u64])
        } else {
            self.seeds[trial]
        }
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.trials).map(|k| self.trial_seed(k)).collect()
    }

    pub fn split_seed(&self) -> u64 {
        self.data.split_seed.unwrap_or_else(|| seed::derive(self.master_seed, &[seed::SPLIT]))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Standardized shots, partitioned at the pretraining boundary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Whole pretraining range in arrival order.
    pub pretrain: Vec<Arc<ShotRecord>>,
    pub train: Vec<ShotRecord>,
    pub val: Vec<ShotRecord>,
    pub test: Vec<ShotRecord>,
    pub stream: Vec<Arc<ShotRecord>>,
    pub preprocess: PreprocessReport,
    pub standardizer: Option<Standardizer>,
    pub channels: usize,
}

pub fn load_raw(cfg: &ExperimentConfig) -> Result<Vec<ShotRecord>> {
    match (&cfg.data.csv, &cfg.data.synthetic) {
        (Some(path), None) => load_shots_csv(path),
        (None, Some(s)) => generate_synthetic_stream(s),
        _ => Err(Error::Config("set exactly one of data.csv and data.synthetic".into())),
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let raw = load_raw(cfg)?;
    let (shots, report) = preprocess(raw, cfg.data.stuck_threshold);
    if report.dropped_nan + report.dropped_stuck > 0 {
        log::info!("preprocessing dropped {} NaN and {} stuck shots", report.dropped_nan, report.dropped_stuck);
    }
    check_order(&shots)?;
    let channels = shots.first().map(|s| s.channels()).unwrap_or(0);
    let (pre, rest): (Vec<ShotRecord>, Vec<ShotRecord>) =
        shots.into_iter().partition(|s| s.shot_id < cfg.data.pretrain_end);
    let rest: Vec<ShotRecord> =
        rest.into_iter().filter(|s| cfg.data.stream_end.is_none_or(|end| s.shot_id < end)).collect();
    if pre.is_empty() {
        return Err(Error::Config(format!("no shots before pretrain_end = {}", cfg.data.pretrain_end)));
    }
    let [a, b, c] = cfg.data.split;
    let parts = split(&pre, (a, b, c), cfg.split_seed()).map_err(|e| Error::Config(e.to_string()))?;
    let standardizer = if cfg.data.standardize { Some(Standardizer::fit(&parts.train)?) } else { None };
    let apply = |v: Vec<ShotRecord>| -> Result<Vec<ShotRecord>> {
        match &standardizer {
            Some(s) => s.apply_all(&v),
            None => Ok(v),
        }
    };
    Ok(PreparedData {
        pretrain: apply(pre)?.into_iter().map(Arc::new).collect(),
        train: apply(parts.train)?,
        val: apply(parts.val)?,
        test: apply(parts.test)?,
        stream: apply(rest)?.into_iter().map(Arc::new).collect(),
        preprocess: report,
        standardizer,
        channels,
    })
}

fn windows_of(shots: &[ShotRecord], window_length: usize, stride: usize) -> Vec<WindowSample> {
    shots.iter().flat_map(|s| windowize(&Arc::new(s.clone()), window_length, stride)).collect()
}

fn windows_mae(model: &DgpaModel, windows: &[WindowSample]) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let preds = model.predict_windows(windows)?;
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let targets: Vec<f64> = windows.iter().map(|w| w.target()).collect();
    Ok(Some(mae(&means, &targets)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: DgpaModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub train_mae: Option<f64>,
    pub val_mae: Option<f64>,
    pub test_mae: Option<f64>,
}

/// Trains a base model on the training split with early stopping on
/// validation MAE, then fits the calibration scale on validation.
///
/// The feature standardization and the head are refit on the training
/// windows after every epoch; epoch 0 in the log is the initialized model.
pub fn pretrain_model(cfg: &ExperimentConfig, data: &PreparedData, trial_seed: u64) -> Result<PretrainOutcome> {
    let (wl, stride) = (cfg.data.window_length, cfg.data.stride);
    let train = windows_of(&data.train, wl, stride);
    if train.is_empty() {
        return Err(Error::Config("pretraining split yields no windows".into()));
    }
    let val = windows_of(&data.val, wl, stride);
    let test = windows_of(&data.test, wl, stride);
    let val_or_train = if val.is_empty() { &train } else { &val };

    let mut model = DgpaModel::new(&cfg.network, &cfg.dgpa, (wl, data.channels), trial_seed)?;
    model.fit_feature_norm(&train)?;
    model.update_head(&train)?;
    let mut optimizer = model.new_optimizer(cfg.pretrain.adam);
    let mut best_val = windows_mae(&model, val_or_train)?.unwrap();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut log = vec![EpochLog { epoch: 0, train_loss: f64::NAN, val_mae: best_val }];
    if cfg.pretrain.max_epochs == 0 {
        log::warn!("pretrain.max_epochs = 0: the base model is left untrained");
    }
    let mut stale = 0;
    for epoch in 1..=cfg.pretrain.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(trial_seed, &[seed::PRETRAIN, epoch as u64]));
        let train_loss = model.train_epoch(&train, cfg.pretrain.batch_size, &mut optimizer, &mut rng)?;
        model.fit_feature_norm(&train)?;
        model.update_head(&train)?;
        let v = windows_mae(&model, val_or_train)?.unwrap();
        log.push(EpochLog { epoch, train_loss, val_mae: v });
        if v < best_val {
            best_val = v;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.pretrain.patience {
                break;
            }
        }
    }
    let mut model = best;
    if val.len() >= crate::calibration::MIN_CALIBRATION_SAMPLES {
        let preds = model.predict_windows(&val)?;
        let data = CalibrationDataset::new(
            preds.iter().map(|p| p.mean).collect(),
            preds.iter().map(|p| p.raw_sigma).collect(),
            val.iter().map(|w| w.target()).collect(),
        )?;
        let fit = fit_alpha(&data, &CoverageGrid::default());
        if !fit.degenerate {
            model.set_alpha(fit.alpha)?;
        }
    } else {
        log::warn!("validation split has too few windows to calibrate; alpha stays 1");
    }
    Ok(PretrainOutcome {
        train_mae: windows_mae(&model, &train)?,
        val_mae: windows_mae(&model, &val)?,
        test_mae: windows_mae(&model, &test)?,
        model,
        log,
        best_epoch,
    })
}

/// One window's fused prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRecord {
    pub shot_id: i64,
    pub window_end: usize,
    pub mean: f64,
    pub sigma: f64,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub trial: usize,
    pub report: MetricReport,
    pub windows: Vec<WindowRecord>,
    pub error: Option<String>,
}

fn window_records(out: &StepOutcome, mean: &[f64], sigma: &[f64], wl: usize, stride: usize) -> Vec<WindowRecord> {
    (0..mean.len())
        .map(|k| WindowRecord {
            shot_id: out.shot_id,
            window_end: k * stride + wl - 1,
            mean: mean[k],
            sigma: sigma[k],
            target: out.targets[k],
        })
        .collect()
}

/// The strategies `strategies` needs to simulate: the two ensemble fusions
/// share one set of trained members.
fn simulation_groups(strategies: &[Strategy]) -> Vec<(Strategy, Vec<Strategy>)> {
    let mut groups = Vec::new();
    for s in [Strategy::Static, Strategy::SingleOnline] {
        if strategies.contains(&s) {
            groups.push((s, vec![s]));
        }
    }
    let fused: Vec<Strategy> =
        [Strategy::NaiveEnsemble, Strategy::UqEnsemble].into_iter().filter(|s| strategies.contains(s)).collect();
    if !fused.is_empty() {
        groups.push((Strategy::UqEnsemble, fused));
    }
    groups
}

fn simulate(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    base: &DgpaModel,
    trial: usize,
    driver: Strategy,
    outputs: &[Strategy],
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<StrategyRun>> {
    let trial_seed = cfg.trial_seed(trial);
    let (wl, stride) = (cfg.data.window_length, cfg.data.stride);
    let mut state = EnsembleState::new(base, driver, &cfg.online, stride, trial_seed)?;
    let depth = cfg.online.capacities(driver).into_iter().max().unwrap_or(0);
    let start = data.pretrain.len().saturating_sub(depth);
    state.prefill(&data.pretrain[start..])?;
    let mut runs: Vec<StrategyRun> = outputs
        .iter()
        .map(|&s| StrategyRun { strategy: s, trial, report: MetricReport::default(), windows: Vec::new(), error: None })
        .collect();
    for (step, shot) in data.stream.iter().enumerate() {
        let out = state.step(shot.clone())?;
        for run in &mut runs {
            if out.targets.is_empty() {
                continue;
            }
            let (mean, sigma) =
                if run.strategy == driver { (out.mean.clone(), out.sigma.clone()) } else { out.fused_with(run.strategy)? };
            let wall = if cfg.record_timing { out.wall_ms } else { 0.0 };
            run.report.push(ShotMetrics::compute(out.shot_id, &mean, &sigma, &out.targets, wall)?);
            run.windows.extend(window_records(&out, &mean, &sigma, wl, stride));
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
                std::fs::create_dir_all(dir)?;
                for m in state.members() {
                    let name = format!("{}_buffer{}_shot{}.json", driver, m.buffer().capacity(), shot.shot_id);
                    m.model().save(&dir.join(name))?;
                }
            }
        }
    }
    Ok(runs)
}

/// Runs every requested strategy of one trial from a shared base model.
/// A failing simulation is reported in its runs' `error` and does not stop
/// the others.
pub fn run_trial(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    base: &DgpaModel,
    trial: usize,
    checkpoint_dir: Option<&Path>,
) -> Vec<StrategyRun> {
    let groups = simulation_groups(&cfg.strategies);
    let mut runs: Vec<StrategyRun> = groups
        .par_iter()
        .map(|(driver, outputs)| match simulate(cfg, data, base, trial, *driver, outputs, checkpoint_dir) {
            Ok(runs) => runs,
            Err(e) => outputs
                .iter()
                .map(|&s| StrategyRun {
                    strategy: s,
                    trial,
                    report: MetricReport::default(),
                    windows: Vec::new(),
                    error: Some(e.to_string()),
                })
                .collect(),
        })
        .flatten()
        .collect();
    runs.sort_by_key(|r| order_of(&cfg.strategies, r.strategy));
    runs
}

fn order_of(strategies: &[Strategy], s: Strategy) -> usize {
    strategies.iter().position(|&x| x == s).unwrap_or(usize::MAX)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn base_path(dir: &Path, trial: usize) -> PathBuf {
    dir.join("pretrain").join(format!("base_trial_{trial}.json"))
}

fn trial_dir(dir: &Path, trial: usize) -> PathBuf {
    dir.join(format!("trial_{trial}"))
}

/// Writes the configured synthetic stream as CSV; returns the path.
pub fn cmd_gen(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let synth = cfg.data.synthetic.as_ref().ok_or_else(|| Error::Config("gen needs a data.synthetic section".into()))?;
    let shots = generate_synthetic_stream(synth)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => cfg.output_dir.join("stream.csv"),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_shots_csv(&path, &shots, synth.channels)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub trial: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub alpha: f64,
    pub train_mae: Option<f64>,
    pub val_mae: Option<f64>,
    pub test_mae: Option<f64>,
}

/// Trains one base model per trial and writes them with training logs.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PretrainRecord>> {
    let dir = cfg.output_dir.join("pretrain");
    std::fs::create_dir_all(&dir)?;
    let data = prepare_data(cfg)?;
    let outcomes: Vec<Result<PretrainOutcome>> = with_pool(cfg.threads, || {
        (0..cfg.trials).into_par_iter().map(|k| pretrain_model(cfg, &data, cfg.trial_seed(k))).collect()
    })?;
    let mut records = Vec::new();
    for (k, outcome) in outcomes.into_iter().enumerate() {
        let o = outcome?;
        o.model.save(&base_path(&cfg.output_dir, k))?;
        let mut text = String::from("epoch,train_loss,val_mae\n");
        for e in &o.log {
            writeln!(text, "{},{},{}", e.epoch, e.train_loss, e.val_mae).unwrap();
        }
        std::fs::write(dir.join(format!("training_log_trial_{k}.csv")), text)?;
        records.push(PretrainRecord {
            trial: k,
            seed: cfg.trial_seed(k),
            best_epoch: o.best_epoch,
            epochs_run: o.log.len() - 1,
            alpha: o.model.alpha(),
            train_mae: o.train_mae,
            val_mae: o.val_mae,
            test_mae: o.test_mae,
        });
    }
    write_json(&dir.join("pretrain_summary.json"), &records)?;
    Ok(records)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub trial: usize,
    pub strategy: Strategy,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub trial_seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub base_checkpoints: Vec<(String, String)>,
    pub failures: Vec<FailureRecord>,
}

const PER_SHOT_HEADER: &str = "shot_id,strategy,trial,mae,mse,mape,mean_sigma,wall_ms\n";

fn per_shot_lines(run: &StrategyRun, out: &mut String) {
    for s in &run.report.shots {
        writeln!(out, "{},{},{},{},{},{},{},{}", s.shot_id, run.strategy, run.trial, s.mae, s.mse, s.mape, s.mean_sigma, s.wall_ms)
            .unwrap();
    }
}

fn write_windows(path: &Path, windows: &[WindowRecord]) -> Result<()> {
    let mut text = String::from("shot_id,window_end,mean,sigma,target\n");
    for w in windows {
        writeln!(text, "{},{},{},{},{}", w.shot_id, w.window_end, w.mean, w.sigma, w.target).unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_windows(path: &Path) -> Result<Vec<WindowRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() })?;
        let num = |k: usize| -> Result<f64> {
            row[k].parse().map_err(|_| Error::Parse { line: i + 2, message: format!("bad number {:?}", &row[k]) })
        };
        out.push(WindowRecord {
            shot_id: row[0].parse().map_err(|_| Error::Parse { line: i + 2, message: "bad shot_id".into() })?,
            window_end: row[1].parse().map_err(|_| Error::Parse { line: i + 2, message: "bad window_end".into() })?,
            mean: num(2)?,
            sigma: num(3)?,
            target: num(4)?,
        });
    }
    Ok(out)
}

/// Runs every (trial, strategy) from the per-trial base checkpoints and
/// writes the results directory, then summarizes it.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Summary> {
    let dir = &cfg.output_dir;
    let mut bases = Vec::with_capacity(cfg.trials);
    let mut base_checkpoints = Vec::new();
    for k in 0..cfg.trials {
        let path = base_path(dir, k);
        let bytes = std::fs::read(&path).map_err(|_| {
            Error::Usage(format!("missing base checkpoint {}; run pretrain first", path.display()))
        })?;
        base_checkpoints.push((path.display().to_string(), hex::encode(Sha256::digest(&bytes))));
        bases.push(DgpaModel::from_json(&bytes)?);
    }
    let data = prepare_data(cfg)?;
    let results: Vec<Vec<StrategyRun>> = with_pool(cfg.threads, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|k| {
                let ckpt = trial_dir(dir, k).join("checkpoints");
                run_trial(cfg, &data, &bases[k], k, Some(&ckpt))
            })
            .collect()
    })?;

    let mut all = String::from(PER_SHOT_HEADER);
    let mut failures = Vec::new();
    for (k, runs) in results.iter().enumerate() {
        let tdir = trial_dir(dir, k);
        std::fs::create_dir_all(&tdir)?;
        let mut text = String::from(PER_SHOT_HEADER);
        for run in runs {
            if let Some(e) = &run.error {
                log::error!("trial {k} strategy {} failed: {e}", run.strategy);
                failures.push(FailureRecord { trial: k, strategy: run.strategy, error: e.clone() });
                continue;
            }
            write_windows(&tdir.join(format!("windows_{}.csv", run.strategy)), &run.windows)?;
            per_shot_lines(run, &mut text);
        }
        std::fs::write(tdir.join("per_shot.csv"), &text)?;
        all.push_str(&text[PER_SHOT_HEADER.len()..]);
    }
    std::fs::write(dir.join("per_shot.csv"), all)?;
    let manifest = Manifest {
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        trial_seeds: cfg.trial_seeds(),
        strategies: cfg.strategies.clone(),
        base_checkpoints,
        failures,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    cmd_report(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub baseline: String,
    /// Shared REC range: 95th percentile of static absolute errors, or of
    /// every strategy's errors when static was not run.
    pub rec_eps_max: f64,
    pub rows: Vec<SummaryRow>,
    pub trials: Vec<TrialMetrics>,
}

/// Metrics of one trial's fused per-window predictions.
pub fn trial_metrics(strategy: Strategy, trial: usize, windows: &[WindowRecord], eps_max: Option<f64>) -> Result<TrialMetrics> {
    let mean: Vec<f64> = windows.iter().map(|w| w.mean).collect();
    let target: Vec<f64> = windows.iter().map(|w| w.target).collect();
    let sigma: Vec<f64> = windows.iter().map(|w| w.sigma).collect();
    let errors: Vec<f64> = mean.iter().zip(&target).map(|(m, y)| (m - y).abs()).collect();
    let aoc = match eps_max {
        Some(e) if e > 0.0 => Some(rec_curve(&errors, e)?.aoc),
        _ => None,
    };
    let miscalibration_area = if windows.len() >= crate::calibration::MIN_CALIBRATION_SAMPLES {
        let data = CalibrationDataset::new(mean.clone(), sigma.clone(), target.clone())?;
        Some(calibration_curve(&data, &CoverageGrid::default(), 1.0).area)
    } else {
        None
    };
    Ok(TrialMetrics {
        strategy: strategy.name().to_string(),
        trial,
        mae: mae(&mean, &target)?,
        mse: crate::metrics::mse(&mean, &target)?,
        mape: crate::metrics::mape(&mean, &target, crate::metrics::MAPE_FLOOR)?,
        mean_sigma: sigma.iter().sum::<f64>() / sigma.len() as f64,
        aoc,
        miscalibration_area,
    })
}

/// Builds the summary table from in-memory per-window results.
pub fn summarize_runs(runs: &[(Strategy, usize, &[WindowRecord])], strategies: &[Strategy]) -> Result<(Summary, Vec<(Strategy, Vec<f64>, Vec<WindowRecord>)>)> {
    let live: Vec<&(Strategy, usize, &[WindowRecord])> = runs.iter().filter(|r| !r.2.is_empty()).collect();
    let static_errors: Vec<f64> = live
        .iter()
        .filter(|r| r.0 == Strategy::Static)
        .flat_map(|r| r.2.iter().map(|w| (w.mean - w.target).abs()))
        .collect();
    let pool = if static_errors.is_empty() {
        live.iter().flat_map(|r| r.2.iter().map(|w| (w.mean - w.target).abs())).collect()
    } else {
        static_errors
    };
    let eps_max = if pool.is_empty() { 0.0 } else { percentile(&pool, 95.0)? };
    let eps = (eps_max > 0.0).then_some(eps_max);
    let mut trials = Vec::new();
    for r in &live {
        trials.push(trial_metrics(r.0, r.1, r.2, eps)?);
    }
    let mut pooled = Vec::new();
    for &s in strategies {
        let windows: Vec<WindowRecord> = live.iter().filter(|r| r.0 == s).flat_map(|r| r.2.iter().copied()).collect();
        let errors: Vec<f64> = windows.iter().map(|w| (w.mean - w.target).abs()).collect();
        if !windows.is_empty() {
            pooled.push((s, errors, windows));
        }
    }
    let baseline = Strategy::SingleOnline.name().to_string();
    let rows = summarize(&trials, &baseline);
    Ok((Summary { baseline, rec_eps_max: eps_max, rows, trials }, pooled))
}

/// Re-summarizes a results directory from its manifest and per-window files.
pub fn cmd_report(dir: &Path) -> Result<Summary> {
    let bytes = std::fs::read(dir.join("manifest.json"))
        .map_err(|_| Error::Usage(format!("{} has no manifest.json", dir.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let mut loaded = Vec::new();
    for k in 0..manifest.trial_seeds.len() {
        for &s in &manifest.strategies {
            if manifest.failures.iter().any(|f| f.trial == k && f.strategy == s) {
                continue;
            }
            let path = trial_dir(dir, k).join(format!("windows_{s}.csv"));
            loaded.push((s, k, read_windows(&path)?));
        }
    }
    let refs: Vec<(Strategy, usize, &[WindowRecord])> = loaded.iter().map(|(s, k, w)| (*s, *k, w.as_slice())).collect();
    let (summary, pooled) = summarize_runs(&refs, &manifest.strategies)?;
    for (s, errors, windows) in &pooled {
        if summary.rec_eps_max > 0.0 {
            write_rec(&dir.join(format!("rec_{s}.txt")), &rec_curve(errors, summary.rec_eps_max)?)?;
        }
        if windows.len() >= crate::calibration::MIN_CALIBRATION_SAMPLES {
            let data = CalibrationDataset::new(
                windows.iter().map(|w| w.mean).collect(),
                windows.iter().map(|w| w.sigma).collect(),
                windows.iter().map(|w| w.target).collect(),
            )?;
            write_curve(&dir.join(format!("calibration_{s}.txt")), &calibration_curve(&data, &CoverageGrid::default(), 1.0))?;
        }
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}
