use super::{layer_shapes, ActShape, LayerParams, LayerSpec, NetworkParams, TensorBuffer};
use crate::error::{Error, Result};
use rand::Rng;

/// Everything the backward pass needs from one forward pass: the activation
/// entering and leaving every layer, pooling winners and dropout masks.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub shapes: Vec<ActShape>,
    pub activations: Vec<Vec<f64>>,
    pool_winners: Vec<Option<Vec<usize>>>,
    dropout_masks: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Runs the stack on one input window of shape `(len, channels)`, time-major.
pub fn network_forward<R: Rng + ?Sized>(
    params: &NetworkParams,
    specs: &[LayerSpec],
    input: &TensorBuffer,
    training: bool,
    rng: &mut R,
) -> Result<TensorBuffer> {
    let shape = match *input.shape() {
        [len, channels] => (len, channels),
        _ => {
            return Err(Error::Config(format!(
                "network input must be (window_length, channels), got {:?}",
                input.shape()
            )))
        }
    };
    let trace = forward_trace(params, specs, input.values(), shape, training, rng)?;
    let out = trace.activations.into_iter().last().unwrap();
    TensorBuffer::new(vec![out.len()], out)
}

pub fn forward_trace<R: Rng + ?Sized>(
    params: &NetworkParams,
    specs: &[LayerSpec],
    input: &[f64],
    input_shape: (usize, usize),
    training: bool,
    rng: &mut R,
) -> Result<ForwardTrace> {
    let shapes = layer_shapes(specs, input_shape)?;
    if input.len() != shapes[0].size() {
        return Err(Error::Config(format!(
            "input has {} values, first layer expects {:?}",
            input.len(),
            input_shape
        )));
    }
    if params.layers.len() != specs.len() {
        return Err(Error::Config("parameter list does not match layer specs".into()));
    }
    let mut activations = Vec::with_capacity(specs.len() + 1);
    activations.push(input.to_vec());
    let mut pool_winners = vec![None; specs.len()];
    let mut dropout_masks = vec![None; specs.len()];

    for (i, spec) in specs.iter().enumerate() {
        let x = activations.last().unwrap();
        let in_shape = shapes[i];
        let out_shape = shapes[i + 1];
        let out = match *spec {
            LayerSpec::Conv1d { filters, kernel_size, stride } => {
                let p = params.layers[i].as_ref().ok_or_else(|| missing(i))?;
                let channels = match in_shape {
                    ActShape::Seq { channels, .. } => channels,
                    ActShape::Flat(_) => unreachable!(),
                };
                let out_len = out_shape.size() / filters;
                let field = kernel_size * channels;
                let p = sized(p, i, filters * field, filters)?;
                let w = p.weight.values();
                let b = p.bias.values();
                let mut out = vec![0.0; out_shape.size()];
                for t in 0..out_len {
                    let start = t * stride * channels;
                    let rf = &x[start..start + field];
                    let row = &mut out[t * filters..(t + 1) * filters];
                    for (f, o) in row.iter_mut().enumerate() {
                        *o = b[f] + dot(&w[f * field..(f + 1) * field], rf);
                    }
                }
                out
            }
            LayerSpec::Maxpool1d { pool, stride } => {
                let channels = match in_shape {
                    ActShape::Seq { channels, .. } => channels,
                    ActShape::Flat(_) => unreachable!(),
                };
                let out_len = out_shape.size() / channels;
                let mut out = vec![0.0; out_shape.size()];
                let mut winners = vec![0usize; out_shape.size()];
                for t in 0..out_len {
                    for c in 0..channels {
                        let mut best = (t * stride) * channels + c;
                        for k in 1..pool {
                            let idx = (t * stride + k) * channels + c;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out[t * channels + c] = x[best];
                        winners[t * channels + c] = best;
                    }
                }
                pool_winners[i] = Some(winners);
                out
            }
            LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Dropout { rate } => {
                if training && rate > 0.0 {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    let out = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
                    dropout_masks[i] = Some(mask);
                    out
                } else {
                    x.clone()
                }
            }
            LayerSpec::Dense { units } => {
                let p = params.layers[i].as_ref().ok_or_else(|| missing(i))?;
                let n_in = in_shape.size();
                let p = sized(p, i, units * n_in, units)?;
                let w = p.weight.values();
                let b = p.bias.values();
                (0..units).map(|u| b[u] + dot(&w[u * n_in..(u + 1) * n_in], x)).collect()
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric_in_layer(i, spec.name(), "non-finite activation"));
        }
        activations.push(out);
    }
    Ok(ForwardTrace { shapes, activations, pool_winners, dropout_masks })
}

fn missing(layer: usize) -> Error {
    Error::Config(format!("layer {layer} has no parameters"))
}

fn sized(p: &LayerParams, layer: usize, weights: usize, biases: usize) -> Result<&LayerParams> {
    if p.weight.values().len() != weights || p.bias.values().len() != biases {
        return Err(Error::Config(format!("layer {layer} parameters do not fit its input shape")));
    }
    Ok(p)
}

/// Reverse pass through a recorded forward pass. Parameter gradients are
/// accumulated into `grads` (which must be shaped like `params`).
pub fn backward(
    params: &NetworkParams,
    specs: &[LayerSpec],
    trace: &ForwardTrace,
    grad_output: &[f64],
    grads: &mut NetworkParams,
) -> Result<()> {
    if grad_output.len() != trace.output().len() {
        return Err(Error::Argument(format!(
            "output gradient has {} values, network output has {}",
            grad_output.len(),
            trace.output().len()
        )));
    }
    let mut g = grad_output.to_vec();
    for i in (0..specs.len()).rev() {
        let x = &trace.activations[i];
        let need_input_grad = i > 0;
        let mut gx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
        match specs[i] {
            LayerSpec::Conv1d { filters, kernel_size, stride } => {
                let p = params.layers[i].as_ref().ok_or_else(|| missing(i))?;
                let gp = grads.layers[i].as_mut().ok_or_else(|| missing(i))?;
                let channels = match trace.shapes[i] {
                    ActShape::Seq { channels, .. } => channels,
                    ActShape::Flat(_) => unreachable!(),
                };
                let field = kernel_size * channels;
                let out_len = g.len() / filters;
                let w = p.weight.values();
                for t in 0..out_len {
                    let start = t * stride * channels;
                    for f in 0..filters {
                        let go = g[t * filters + f];
                        if go == 0.0 {
                            continue;
                        }
                        gp.bias.values_mut()[f] += go;
                        axpy(
                            go,
                            &x[start..start + field],
                            &mut gp.weight.values_mut()[f * field..(f + 1) * field],
                        );
                        if need_input_grad {
                            axpy(go, &w[f * field..(f + 1) * field], &mut gx[start..start + field]);
                        }
                    }
                }
            }
            LayerSpec::Maxpool1d { .. } => {
                if need_input_grad {
                    let winners = trace.pool_winners[i].as_ref().unwrap();
                    for (go, &idx) in g.iter().zip(winners) {
                        gx[idx] += go;
                    }
                }
            }
            LayerSpec::Relu => {
                if need_input_grad {
                    for ((o, &go), &xi) in gx.iter_mut().zip(&g).zip(x) {
                        *o = if xi > 0.0 { go } else { 0.0 };
                    }
                }
            }
            LayerSpec::Dropout { .. } => {
                if need_input_grad {
                    match &trace.dropout_masks[i] {
                        Some(mask) => {
                            for ((o, &go), &m) in gx.iter_mut().zip(&g).zip(mask) {
                                *o = go * m;
                            }
                        }
                        None => gx.copy_from_slice(&g),
                    }
                }
            }
            LayerSpec::Dense { units } => {
                let p = params.layers[i].as_ref().ok_or_else(|| missing(i))?;
                let gp = grads.layers[i].as_mut().ok_or_else(|| missing(i))?;
                let n_in = x.len();
                let w = p.weight.values();
                for u in 0..units {
                    let go = g[u];
                    if go == 0.0 {
                        continue;
                    }
                    gp.bias.values_mut()[u] += go;
                    axpy(go, x, &mut gp.weight.values_mut()[u * n_in..(u + 1) * n_in]);
                    if need_input_grad {
                        axpy(go, &w[u * n_in..(u + 1) * n_in], &mut gx);
                    }
                }
            }
        }
        if need_input_grad && gx.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric_in_layer(i, specs[i].name(), "non-finite gradient"));
        }
        g = gx;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{mae_gradient, LayerParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_dense_then_relu_is_relu() {
        let specs = [LayerSpec::dense(3), LayerSpec::Relu];
        let mut params = NetworkParams::zeros(&specs, (1, 3)).unwrap();
        let w = params.layers[0].as_mut().unwrap().weight.values_mut();
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        let input = TensorBuffer::new(vec![1, 3], vec![-1.5, 0.0, 2.0]).unwrap();
        let out = network_forward(&params, &specs, &input, false, &mut rng()).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_sums_window_valid_mode() {
        let specs = [LayerSpec::conv1d(1)];
        let mut params = NetworkParams::zeros(&specs, (4, 1)).unwrap();
        params.layers[0].as_mut().unwrap().weight.values_mut().fill(1.0);
        let input = TensorBuffer::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = network_forward(&params, &specs, &input, false, &mut rng()).unwrap();
        assert_eq!(out.values(), &[6.0, 9.0]);
    }

    #[test]
    fn conv_mixes_channels_time_major() {
        // two channels, kernel 3: filter picks channel 1 at the middle tap
        let specs = [LayerSpec::conv1d(1)];
        let mut params = NetworkParams::zeros(&specs, (3, 2)).unwrap();
        params.layers[0].as_mut().unwrap().weight.values_mut()[3] = 1.0;
        let input = TensorBuffer::new(vec![3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let out = network_forward(&params, &specs, &input, false, &mut rng()).unwrap();
        assert_eq!(out.values(), &[20.0]);
    }

    #[test]
    fn maxpool_takes_pairwise_max() {
        let specs = [LayerSpec::maxpool1d()];
        let params = NetworkParams::zeros(&specs, (4, 1)).unwrap();
        let input = TensorBuffer::new(vec![4, 1], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let out = network_forward(&params, &specs, &input, false, &mut rng()).unwrap();
        assert_eq!(out.values(), &[3.0, 5.0]);
    }

    #[test]
    fn dropout_only_when_training() {
        let specs = [LayerSpec::Dropout { rate: 0.5 }];
        let params = NetworkParams::zeros(&specs, (1, 64)).unwrap();
        let input = TensorBuffer::new(vec![1, 64], vec![1.0; 64]).unwrap();
        let eval = network_forward(&params, &specs, &input, false, &mut rng()).unwrap();
        assert_eq!(eval.values(), input.values());
        let train = network_forward(&params, &specs, &input, true, &mut rng()).unwrap();
        assert!(train.values().contains(&0.0));
        assert!(train.values().iter().all(|&v| v == 0.0 || v == 2.0));
        let again = network_forward(&params, &specs, &input, true, &mut rng()).unwrap();
        assert_eq!(train, again);
    }

    #[test]
    fn wrong_input_shape_is_a_config_error() {
        let specs = [LayerSpec::conv1d(1)];
        let params = NetworkParams::zeros(&specs, (4, 1)).unwrap();
        let input = TensorBuffer::new(vec![4, 2], vec![0.0; 8]).unwrap();
        let err = network_forward(&params, &specs, &input, false, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let specs = [LayerSpec::Relu, LayerSpec::dense(1)];
        let mut params = NetworkParams::zeros(&specs, (1, 1)).unwrap();
        params.layers[1] = Some(LayerParams {
            weight: TensorBuffer::new(vec![1, 1], vec![f64::MAX]).unwrap(),
            bias: TensorBuffer::zeros(vec![1]),
        });
        let input = TensorBuffer::new(vec![1, 1], vec![10.0]).unwrap();
        let err = network_forward(&params, &specs, &input, false, &mut rng()).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn scalar_linear_model_mae_gradient() {
        // y = w x, x = 2, w = 0.5, target 3 > prediction 1: dL/dw = -x = -2
        let specs = [LayerSpec::dense(1)];
        let mut params = NetworkParams::zeros(&specs, (1, 1)).unwrap();
        params.layers[0].as_mut().unwrap().weight.values_mut()[0] = 0.5;
        let trace = forward_trace(&params, &specs, &[2.0], (1, 1), false, &mut rng()).unwrap();
        let g = mae_gradient(trace.output(), &[3.0]).unwrap();
        let mut grads = params.zeros_like();
        backward(&params, &specs, &trace, &g, &mut grads).unwrap();
        assert_eq!(grads.layers[0].as_ref().unwrap().weight.values(), &[-2.0]);
        assert_eq!(grads.layers[0].as_ref().unwrap().bias.values(), &[-1.0]);
    }

    #[test]
    fn inference_is_pure() {
        let specs = crate::diffnet::Architecture::default().layer_specs();
        let params = NetworkParams::init(&specs, (100, 9), &mut rng()).unwrap();
        let input: Vec<f64> = (0..900).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let a = forward_trace(&params, &specs, &input, (100, 9), false, &mut rng()).unwrap();
        let mut other = ChaCha8Rng::seed_from_u64(999);
        let b = forward_trace(&params, &specs, &input, (100, 9), false, &mut other).unwrap();
        assert_eq!(a.output(), b.output());
    }
}
