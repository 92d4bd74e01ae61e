//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

pub mod gradcheck;

use std::io::Write;
use std::path::{Path, PathBuf};
use uq_online::runner::ExperimentConfig;

/// Small end-to-end experiment: every strategy, two trials, a few seconds.
pub const TINY: &str = r#"
master_seed = 11
trials = 2
strategies = ["static", "single_online", "naive_ensemble", "uq_ensemble"]

[data]
window_length = 24
stride = 4
pretrain_end = 12

[data.synthetic]
n_shots = 24
shot_length = 48
channels = 2
hidden_width = 4
seed = 3
drift = [{ shot = 16, kind = "abrupt", magnitude = 1.0 }]

[network]
conv_filters = [4]
dense_units = [8]

[dgpa]
features = 32
length_scale = 2.0
penalty_weight = 0.01

[pretrain]
max_epochs = 4
adam = { learning_rate = 1e-3 }

[online]
buffer_schedule = [1, 2, 4]
single_buffer = 2
calibration_min_windows = 10
"#;

pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

pub fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// One result line per criterion, written past the test harness capture.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion}: {status} {detail}");
    let _ = out.flush();
}

/// Every regular file below `dir`, relative path and bytes, in path order.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}
