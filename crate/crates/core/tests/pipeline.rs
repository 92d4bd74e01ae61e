//! End-to-end behavior of the library commands on small synthetic streams.

mod common;

use common::{tiny_config, tree};
use nalgebra::{DMatrix, DVector};
use uq_online::ensemble::Strategy;
use uq_online::runner::{cmd_gen, cmd_pretrain, cmd_report, cmd_run, prepare_data, pretrain_model};
use uq_online::stream::{
    generate_synthetic_stream, load_shots_csv, DriftEvent, DriftKind, ShotRecord, SyntheticStreamConfig,
};

#[test]
fn gen_round_trips_through_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let path = cmd_gen(&cfg, Some(&tmp.path().join("s.csv"))).unwrap();
    let loaded = load_shots_csv(&path).unwrap();
    let direct = generate_synthetic_stream(cfg.data.synthetic.as_ref().unwrap()).unwrap();
    assert_eq!(loaded, direct);
}

#[test]
fn generator_seeds_give_different_streams() {
    let base = SyntheticStreamConfig { n_shots: 3, shot_length: 20, ..Default::default() };
    let other = SyntheticStreamConfig { seed: base.seed + 1, ..base.clone() };
    let a = generate_synthetic_stream(&base).unwrap();
    let b = generate_synthetic_stream(&other).unwrap();
    assert_ne!(a[0].inputs(), b[0].inputs());
    assert_eq!(a, generate_synthetic_stream(&base).unwrap());
}

#[test]
fn empty_stream_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    let synth = cfg.data.synthetic.as_mut().unwrap();
    synth.n_shots = 0;
    synth.drift.clear();
    let path = cmd_gen(&cfg, Some(&tmp.path().join("empty.csv"))).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    assert!(text.starts_with("shot_id,t,"));
    assert!(load_shots_csv(&path).unwrap().is_empty());
}

/// Ridge regression on per-window channel means and last values, written
/// independently of the library model.
fn ridge_window_model(shots: &[ShotRecord], width: usize) -> impl Fn(&ShotRecord) -> f64 {
    fn features(s: &ShotRecord, width: usize) -> Vec<Vec<f64>> {
        let c = s.channels();
        (width - 1..s.len())
            .map(|end| {
                let mut f = vec![1.0];
                for ch in 0..c {
                    let m = (end + 1 - width..=end).map(|t| s.input(t, ch)).sum::<f64>() / width as f64;
                    f.push(m);
                    f.push(s.input(end, ch));
                }
                f
            })
            .collect()
    }
    let rows: Vec<Vec<f64>> = shots.iter().flat_map(|s| features(s, width)).collect();
    let ys: Vec<f64> = shots.iter().flat_map(|s| s.target()[width - 1..].to_vec()).collect();
    let p = rows[0].len();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let gram = x.transpose() * &x + DMatrix::identity(p, p) * 1e-6;
    let beta = gram.cholesky().unwrap().solve(&(x.transpose() * DVector::from_vec(ys)));
    move |s: &ShotRecord| {
        let f = features(s, width);
        let tail = &s.target()[width - 1..];
        f.iter().zip(tail).map(|(r, y)| (DVector::from_vec(r.clone()).dot(&beta) - y).abs()).sum::<f64>() / tail.len() as f64
    }
}

#[test]
fn abrupt_drift_breaks_a_model_fit_before_it() {
    let config = SyntheticStreamConfig {
        n_shots: 40,
        shot_length: 60,
        channels: 3,
        drift: vec![DriftEvent { shot: 20, kind: DriftKind::Abrupt, magnitude: 2.0 }],
        ..Default::default()
    };
    let shots = generate_synthetic_stream(&config).unwrap();
    let err = ridge_window_model(&shots[..15], 10);
    let mean = |r: std::ops::Range<usize>| r.clone().map(|k| err(&shots[k])).sum::<f64>() / r.len() as f64;
    let (held_out, post) = (mean(15..20), mean(20..40));
    assert!(post > 2.0 * held_out, "held-out pre-drift {held_out}, post-drift {post}");

    let stationary = SyntheticStreamConfig { drift: Vec::new(), ..config };
    let shots = generate_synthetic_stream(&stationary).unwrap();
    let err = ridge_window_model(&shots[..15], 10);
    let mean = |r: std::ops::Range<usize>| r.clone().map(|k| err(&shots[k])).sum::<f64>() / r.len() as f64;
    let (held_out, late) = (mean(15..20), mean(20..40));
    assert!(late < 1.5 * held_out, "stationary stream: held-out {held_out}, late {late}");
}

#[test]
fn pretraining_is_deterministic_and_zero_epochs_is_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("a"));
    let data = prepare_data(&cfg).unwrap();
    let a = pretrain_model(&cfg, &data, 5).unwrap();
    let b = pretrain_model(&cfg, &data, 5).unwrap();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert_ne!(a.model.to_json().unwrap(), pretrain_model(&cfg, &data, 6).unwrap().model.to_json().unwrap());

    let mut zero = cfg.clone();
    zero.pretrain.max_epochs = 0;
    let z = pretrain_model(&zero, &data, 5).unwrap();
    assert_eq!(z.log.len(), 1);
    assert_eq!(z.best_epoch, 0);
    assert!(z.val_mae.unwrap().is_finite());
}

#[test]
fn stationary_stream_generalizes_from_validation_to_test() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.data.pretrain_end = 60;
    cfg.pretrain.max_epochs = 30;
    let synth = cfg.data.synthetic.as_mut().unwrap();
    synth.n_shots = 60;
    synth.drift.clear();
    let data = prepare_data(&cfg).unwrap();
    let out = pretrain_model(&cfg, &data, 9).unwrap();
    let (val, test) = (out.val_mae.unwrap(), out.test_mae.unwrap());
    assert!((test - val).abs() <= 0.2 * val, "val {val}, test {test}");
}

#[test]
fn run_without_pretraining_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let err = cmd_run(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn run_adapts_and_report_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.trials = 1;
    let synth = cfg.data.synthetic.as_mut().unwrap();
    synth.n_shots = 40;
    synth.drift[0].magnitude = 3.0;
    cmd_pretrain(&cfg).unwrap();
    let summary = cmd_run(&cfg).unwrap();
    let row = |s: Strategy| summary.rows.iter().find(|r| r.strategy == s.name()).unwrap();
    let (online, fixed) = (row(Strategy::SingleOnline).mae.mean, row(Strategy::Static).mae.mean);
    assert!(online < fixed, "single_online {online}, static {fixed}");
    for r in &summary.rows {
        assert_eq!(r.trials, 1);
        assert_eq!(r.mae.std, 0.0);
    }
    let before = tree(tmp.path());
    assert_eq!(cmd_report(tmp.path()).unwrap(), summary);
    assert_eq!(tree(tmp.path()), before);
}
