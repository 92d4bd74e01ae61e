//! Seeded non-stationary shot streams.
//!
//! Inputs are per-channel AR(1) processes with coefficient 0.95 and unit
//! stationary variance around a channel offset. The target at step `t` is a
//! one-hidden-layer tanh map of an exponential moving average of the inputs
//! up to `t` (time constant `target_memory` steps; 1 means the inputs at `t`
//! alone) plus Gaussian noise. Drift
//! events move the map parameters (and, through `input_shift`, the channel
//! offsets) along a random direction: at once for abrupt events, linearly
//! over `gradual_span` shots for gradual ones.

use super::ShotRecord;
use crate::error::{Error, Result};
use crate::seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const AR_COEFF: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Abrupt,
    Gradual,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvent {
    /// Index of the first affected shot.
    pub shot: usize,
    pub kind: DriftKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticStreamConfig {
    pub n_shots: usize,
    pub shot_length: usize,
    pub channels: usize,
    pub drift: Vec<DriftEvent>,
    pub noise_std: f64,
    pub seed: u64,
    pub gradual_span: usize,
    pub hidden_width: usize,
    /// Scale of the channel-offset move per unit drift magnitude.
    pub input_shift: f64,
    /// Scale of the move of the hidden-layer weights and biases per unit
    /// drift magnitude; the read-out always moves at full scale.
    pub map_shift: f64,
    pub first_shot_id: i64,
    /// Time constant, in steps, of the input average the target reads.
    pub target_memory: usize,
}

impl Default for SyntheticStreamConfig {
    fn default() -> Self {
        Self {
            n_shots: 200,
            shot_length: 1020,
            channels: 9,
            drift: Vec::new(),
            noise_std: 0.05,
            seed: 0,
            gradual_span: 50,
            hidden_width: 16,
            input_shift: 0.5,
            map_shift: 0.0,
            first_shot_id: 0,
            target_memory: 16,
        }
    }
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden_width == 0 || self.shot_length == 0 {
            return Err(Error::Argument("synthetic stream needs positive channels, width and length".into()));
        }
        if self.gradual_span == 0 || self.target_memory == 0 {
            return Err(Error::Argument("gradual_span and target_memory must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !self.input_shift.is_finite() || !self.map_shift.is_finite() {
            return Err(Error::Argument("noise_std, input_shift and map_shift must be finite, noise_std >= 0".into()));
        }
        for (i, ev) in self.drift.iter().enumerate() {
            if ev.shot >= self.n_shots {
                return Err(Error::Argument(format!("drift event {i} at shot {} outside [0, {})", ev.shot, self.n_shots)));
            }
            if !(ev.magnitude.is_finite() && ev.magnitude >= 0.0) {
                return Err(Error::Argument(format!("drift event {i} has invalid magnitude {}", ev.magnitude)));
            }
            if i > 0 && ev.shot < self.drift[i - 1].shot {
                return Err(Error::Argument("drift events must be sorted by shot".into()));
            }
        }
        Ok(())
    }
}

/// Parameters of the target map plus the channel offsets, flattened so that
/// drift is a vector move.
#[derive(Debug, Clone)]
struct MapState {
    values: Vec<f64>,
}

struct Layout {
    channels: usize,
    width: usize,
}

impl Layout {
    fn len(&self) -> usize {
        // A (w x c), c_bias (w), v (w), d (1), offsets (c)
        self.width * self.channels + 2 * self.width + 1 + self.channels
    }

    fn draw(&self, rng: &mut ChaCha8Rng, hidden_scale: f64, offset_scale: f64) -> MapState {
        let (c, w) = (self.channels, self.width);
        let mut values = Vec::with_capacity(self.len());
        let a_std = hidden_scale / (c as f64).sqrt();
        let v_std = 1.0 / (w as f64).sqrt();
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        values.extend((0..w * c).map(|_| a_std * normal()));
        values.extend((0..w).map(|_| 0.5 * hidden_scale * normal()));
        values.extend((0..w).map(|_| v_std * normal()));
        values.push(0.1 * normal());
        values.extend((0..c).map(|_| offset_scale * normal()));
        MapState { values }
    }

    fn offsets<'a>(&self, s: &'a MapState) -> &'a [f64] {
        &s.values[self.len() - self.channels..]
    }

    fn eval(&self, s: &MapState, x: &[f64]) -> f64 {
        let (c, w) = (self.channels, self.width);
        let a = &s.values[..w * c];
        let bias = &s.values[w * c..w * c + w];
        let v = &s.values[w * c + w..w * c + 2 * w];
        let d = s.values[w * c + 2 * w];
        let mut y = d;
        for j in 0..w {
            let pre: f64 = bias[j] + a[j * c..(j + 1) * c].iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
            y += v[j] * pre.tanh();
        }
        y
    }
}

fn ramp(ev: &DriftEvent, shot: usize, span: usize) -> f64 {
    match ev.kind {
        DriftKind::None => 0.0,
        DriftKind::Abrupt => {
            if shot >= ev.shot {
                1.0
            } else {
                0.0
            }
        }
        DriftKind::Gradual => {
            if shot < ev.shot {
                0.0
            } else {
                (((shot - ev.shot + 1) as f64) / span as f64).min(1.0)
            }
        }
    }
}

pub fn generate_synthetic_stream(config: &SyntheticStreamConfig) -> Result<Vec<ShotRecord>> {
    config.validate()?;
    let layout = Layout { channels: config.channels, width: config.hidden_width };
    let mut map_rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[seed::MAP]));
    let base = layout.draw(&mut map_rng, 1.0, 0.0);
    let directions: Vec<MapState> =
        config.drift.iter().map(|_| layout.draw(&mut map_rng, config.map_shift, config.input_shift)).collect();

    let mut shots = Vec::with_capacity(config.n_shots);
    let innovation = (1.0 - AR_COEFF * AR_COEFF).sqrt();
    for k in 0..config.n_shots {
        let mut state = base.clone();
        for (ev, dir) in config.drift.iter().zip(&directions) {
            let r = ramp(ev, k, config.gradual_span) * ev.magnitude;
            if r != 0.0 {
                for (v, d) in state.values.iter_mut().zip(&dir.values) {
                    *v += r * d;
                }
            }
        }
        let offsets = layout.offsets(&state).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[seed::SHOT, k as u64]));
        let c = config.channels;
        let mut ar: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut inputs = Vec::with_capacity(config.shot_length * c);
        let mut target = Vec::with_capacity(config.shot_length);
        let mut row = vec![0.0; c];
        let keep = 1.0 - 1.0 / config.target_memory as f64;
        // the average starts at the stationary mean of its input
        let mut avg = offsets.clone();
        for t in 0..config.shot_length {
            if t > 0 {
                for a in ar.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *a = AR_COEFF * *a + innovation * e;
                }
            }
            for j in 0..c {
                row[j] = ar[j] + offsets[j];
                avg[j] = keep * avg[j] + (1.0 - keep) * row[j];
            }
            let noise: f64 = StandardNormal.sample(&mut rng);
            target.push(layout.eval(&state, &avg) + config.noise_std * noise);
            inputs.extend_from_slice(&row);
        }
        shots.push(ShotRecord::from_time_major(config.first_shot_id + k as i64, c, inputs, target)?);
    }
    Ok(shots)
}
