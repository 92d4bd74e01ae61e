//! A small differentiable network engine covering exactly the layer set the
//! feature extractor needs: 1-D convolution, max pooling, ReLU, dropout and
//! dense layers, with hand-written reverse-mode gradients per layer.
//!
//! Activations flowing through the stack are either a sequence `(len, channels)`
//! stored time-major, or a flat vector once the first dense layer has been
//! applied (flattening is implicit).

mod adam;
mod layers;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{backward, forward_trace, network_forward, ForwardTrace};
pub use loss::{
    bilip_gradients, bilip_penalty, bilip_penalty_features, mae_gradient, mae_loss, select_pairs,
    PenaltyOutcome, BILIP_LOWER, BILIP_UPPER,
};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBuffer {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TensorBuffer {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Argument(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Argument(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d { filters: usize, kernel_size: usize, stride: usize },
    Maxpool1d { pool: usize, stride: usize },
    Relu,
    Dropout { rate: f64 },
    Dense { units: usize },
}

impl LayerSpec {
    pub fn conv1d(filters: usize) -> Self {
        LayerSpec::Conv1d { filters, kernel_size: 3, stride: 1 }
    }

    pub fn maxpool1d() -> Self {
        LayerSpec::Maxpool1d { pool: 2, stride: 2 }
    }

    pub fn dropout() -> Self {
        LayerSpec::Dropout { rate: 0.05 }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Maxpool1d { .. } => "maxpool1d",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv1d { filters, kernel_size, stride } => {
                filters > 0 && kernel_size > 0 && stride > 0
            }
            LayerSpec::Maxpool1d { pool, stride } => pool > 0 && stride > 0,
            LayerSpec::Relu => true,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::Dense { units } => units > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer parameters: {self:?}")))
        }
    }
}

/// Shape of an activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Seq { len: usize, channels: usize },
    Flat(usize),
}

impl ActShape {
    pub fn size(&self) -> usize {
        match *self {
            ActShape::Seq { len, channels } => len * channels,
            ActShape::Flat(n) => n,
        }
    }
}

/// Widths of the convolution and dense blocks.
///
/// Each conv block is `conv1d -> relu -> maxpool1d`; each dense block is
/// `dense -> relu -> dropout`. The output of the last dense block is the
/// hidden representation fed to the uncertainty head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub conv_filters: Vec<usize>,
    pub dense_units: Vec<usize>,
    pub kernel_size: usize,
    pub conv_stride: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub dropout_rate: f64,
}

impl Default for Architecture {
    /// Desk-scale widths.
    fn default() -> Self {
        Self {
            conv_filters: vec![16, 8],
            dense_units: vec![32, 32],
            kernel_size: 3,
            conv_stride: 1,
            pool_size: 2,
            pool_stride: 2,
            dropout_rate: 0.05,
        }
    }
}

impl Architecture {
    /// Full-size widths: three conv blocks of 128 filters (last 64) and two
    /// hidden dense layers of 128 units ahead of the output head.
    pub fn full_size() -> Self {
        Self {
            conv_filters: vec![128, 128, 64],
            dense_units: vec![128, 128],
            ..Self::default()
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &filters in &self.conv_filters {
            specs.push(LayerSpec::Conv1d {
                filters,
                kernel_size: self.kernel_size,
                stride: self.conv_stride,
            });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Maxpool1d { pool: self.pool_size, stride: self.pool_stride });
        }
        for &units in &self.dense_units {
            specs.push(LayerSpec::Dense { units });
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Dropout { rate: self.dropout_rate });
        }
        specs
    }
}

/// Walks the layer list and returns the activation shape after every layer
/// (index 0 is the input shape).
pub fn layer_shapes(specs: &[LayerSpec], input: (usize, usize)) -> Result<Vec<ActShape>> {
    let (len, channels) = input;
    if len == 0 || channels == 0 {
        return Err(Error::Config(format!("input shape {input:?} is empty")));
    }
    let mut shapes = vec![ActShape::Seq { len, channels }];
    let mut seen_dense = false;
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let cur = *shapes.last().unwrap();
        let next = match (*spec, cur) {
            (LayerSpec::Conv1d { filters, kernel_size, stride }, ActShape::Seq { len, .. }) => {
                if seen_dense {
                    return Err(Error::Config(format!("layer {i}: conv1d after dense")));
                }
                if len < kernel_size {
                    return Err(Error::Config(format!(
                        "layer {i}: conv1d kernel {kernel_size} longer than sequence {len}"
                    )));
                }
                ActShape::Seq { len: (len - kernel_size) / stride + 1, channels: filters }
            }
            (LayerSpec::Maxpool1d { pool, stride }, ActShape::Seq { len, channels }) => {
                if len < pool {
                    return Err(Error::Config(format!(
                        "layer {i}: pool {pool} longer than sequence {len}"
                    )));
                }
                ActShape::Seq { len: (len - pool) / stride + 1, channels }
            }
            (LayerSpec::Conv1d { .. } | LayerSpec::Maxpool1d { .. }, ActShape::Flat(_)) => {
                return Err(Error::Config(format!(
                    "layer {i}: {} needs a sequence input",
                    spec.name()
                )))
            }
            (LayerSpec::Dense { units }, _) => {
                seen_dense = true;
                ActShape::Flat(units)
            }
            (LayerSpec::Relu | LayerSpec::Dropout { .. }, s) => s,
        };
        shapes.push(next);
    }
    Ok(shapes)
}

/// Output width of the stack for a given input shape.
pub fn output_dim(specs: &[LayerSpec], input: (usize, usize)) -> Result<usize> {
    Ok(layer_shapes(specs, input)?.last().unwrap().size())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: TensorBuffer,
    pub bias: TensorBuffer,
}

/// Per-layer weights, `None` for parameter-free layers.
///
/// Conv kernels are stored `[filters, kernel_size, in_channels]` so that one
/// filter dotted against a time-major receptive field is a contiguous product.
/// Dense weights are `[units, inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<Option<LayerParams>>,
}

impl NetworkParams {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        specs: &[LayerSpec],
        input: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(specs, input)?;
        for layer in params.layers.iter_mut().flatten() {
            let shape = layer.weight.shape();
            let fan_in: usize = shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            for w in layer.weight.values_mut() {
                *w = normal.sample(rng);
            }
        }
        Ok(params)
    }

    pub fn zeros(specs: &[LayerSpec], input: (usize, usize)) -> Result<Self> {
        let shapes = layer_shapes(specs, input)?;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| match (*spec, shapes[i]) {
                (LayerSpec::Conv1d { filters, kernel_size, .. }, ActShape::Seq { channels, .. }) => {
                    Some(LayerParams {
                        weight: TensorBuffer::zeros(vec![filters, kernel_size, channels]),
                        bias: TensorBuffer::zeros(vec![filters]),
                    })
                }
                (LayerSpec::Dense { units }, inp) => Some(LayerParams {
                    weight: TensorBuffer::zeros(vec![units, inp.size()]),
                    bias: TensorBuffer::zeros(vec![units]),
                }),
                _ => None,
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: TensorBuffer::zeros(p.weight.shape().to_vec()),
                        bias: TensorBuffer::zeros(p.bias.shape().to_vec()),
                    })
                })
                .collect(),
        }
    }

    /// Weight then bias for every parameterised layer, in layer order.
    pub fn tensors(&self) -> Vec<&TensorBuffer> {
        self.layers.iter().flatten().flat_map(|p| [&p.weight, &p.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut TensorBuffer> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_against(&self, specs: &[LayerSpec], input: (usize, usize)) -> Result<()> {
        let expected = Self::zeros(specs, input)?;
        let same = expected.layers.len() == self.layers.len()
            && expected.layers.iter().zip(&self.layers).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
                }
                _ => false,
            });
        if same {
            Ok(())
        } else {
            Err(Error::Config("parameter shapes do not match the layer specs".into()))
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}
