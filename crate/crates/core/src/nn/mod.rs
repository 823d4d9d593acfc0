//! Minimal feed-forward engine: dense, ReLU and softmax layers with exact
//! backpropagation over sequential stacks.
//!
//! A model is just `&[Layer]`. Splitting a model at the cut layer is slicing
//! that list, so the same [`forward`]/[`backward`] run the client segment, the
//! server segment and the unsplit stack.

mod gradcheck;
mod loss;
mod optim;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use loss::{loss_softmax_ce, softmax_ce_weighted, LossOutput};
pub use optim::{adam_step, sgd_step, AdamConfig, OptimizerKind, OptimizerState};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// `y = x Wᵀ + b` with `W: [out, in]`, `b: [out]`.
    Dense { weights: Tensor, bias: Tensor },
    Relu,
    /// Row-wise softmax. Training heads feed logits straight into
    /// [`loss_softmax_ce`] instead; this layer exists for probability outputs.
    Softmax,
}

impl Layer {
    pub fn dense(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape() != [weights.rows()] {
            return Err(Error::dim(format!(
                "dense layer needs W [out, in] and b [out], got {:?} and {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::Numeric("dense layer parameters".into()));
        }
        Ok(Layer::Dense { weights, bias })
    }

    /// Dense layer with weights drawn from `U(-√(6/(in+out)), √(6/(in+out)))`
    /// and zero bias.
    pub fn dense_init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Layer::Dense {
            weights: Tensor::new(vec![outputs, inputs], data).expect("shape matches"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Layer::Dense { weights, .. } => Some(weights.shape()[1]),
            _ => None,
        }
    }

    pub fn output_dim(&self) -> Option<usize> {
        match self {
            Layer::Dense { weights, .. } => Some(weights.shape()[0]),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weights, bias } => vec![weights, bias],
            _ => Vec::new(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { weights, bias } => {
                let (out_dim, in_dim) = (weights.shape()[0], weights.shape()[1]);
                if x.cols() != in_dim {
                    return Err(Error::dim(format!(
                        "dense layer expects {in_dim} features, got {}",
                        x.cols()
                    )));
                }
                let mut y = Tensor::zeros(&[x.rows(), out_dim]);
                let w = weights.data();
                let b = bias.data();
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let yr = y.row_mut(r);
                    for (o, yo) in yr.iter_mut().enumerate() {
                        *yo = dot(xr, &w[o * in_dim..(o + 1) * in_dim]) + b[o];
                    }
                }
                Ok(y)
            }
            Layer::Relu => {
                let mut y = x.clone();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                Ok(y)
            }
            Layer::Softmax => {
                let mut y = x.clone();
                for r in 0..y.rows() {
                    softmax_in_place(y.row_mut(r));
                }
                Ok(y)
            }
        }
    }

    /// Returns `(∂L/∂input, parameter gradients)`.
    fn backward(&self, input: &Tensor, output: &Tensor, upstream: &Tensor) -> (Tensor, Vec<Tensor>) {
        match self {
            Layer::Dense { weights, .. } => {
                let (out_dim, in_dim) = (weights.shape()[0], weights.shape()[1]);
                let w = weights.data();
                let mut dw = Tensor::zeros(&[out_dim, in_dim]);
                let mut db = Tensor::zeros(&[out_dim]);
                let mut dx = Tensor::zeros(&[input.rows(), in_dim]);
                for r in 0..input.rows() {
                    let xr = input.row(r);
                    let gr = upstream.row(r);
                    let dxr = dx.row_mut(r);
                    for (o, &g) in gr.iter().enumerate() {
                        let dwo = &mut dw.data_mut()[o * in_dim..(o + 1) * in_dim];
                        axpy(g, xr, dwo);
                        axpy(g, &w[o * in_dim..(o + 1) * in_dim], dxr);
                    }
                    for (d, &g) in db.data_mut().iter_mut().zip(gr) {
                        *d += g;
                    }
                }
                (dx, vec![dw, db])
            }
            Layer::Relu => {
                let mut dx = upstream.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                (dx, Vec::new())
            }
            Layer::Softmax => {
                let mut dx = upstream.clone();
                for r in 0..dx.rows() {
                    let y = output.row(r);
                    let inner = dot(upstream.row(r), y);
                    for (d, &yi) in dx.row_mut(r).iter_mut().zip(y) {
                        *d = yi * (*d - inner);
                    }
                }
                (dx, Vec::new())
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Every intermediate value of one forward pass: `activations[0]` is the
/// input, `activations[k + 1]` is the output of layer `k`.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub activations: Vec<Tensor>,
}

impl ActivationCache {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("cache always holds the input")
    }
}

/// Gradients of one backward pass. `params` follows the order of
/// [`parameters`]: `W` then `b` for each dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

pub fn forward(layers: &[Layer], input: &Tensor) -> Result<ActivationCache> {
    if input.shape().len() != 2 {
        return Err(Error::dim(format!(
            "expected a [batch, features] input, got {:?}",
            input.shape()
        )));
    }
    if !input.is_finite() {
        return Err(Error::Numeric("network input".into()));
    }
    let mut activations = Vec::with_capacity(layers.len() + 1);
    activations.push(input.clone());
    for (k, layer) in layers.iter().enumerate() {
        let y = layer.forward(activations.last().unwrap())?;
        if !y.is_finite() {
            return Err(Error::Numeric(format!("activation of layer {k}")));
        }
        activations.push(y);
    }
    Ok(ActivationCache { activations })
}

/// Output of a forward pass without keeping the intermediate activations.
pub fn predict(layers: &[Layer], input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    for (k, layer) in layers.iter().enumerate() {
        x = layer.forward(&x)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("activation of layer {k}")));
        }
    }
    Ok(x)
}

pub fn backward(layers: &[Layer], cache: &ActivationCache, upstream: &Tensor) -> Result<Gradients> {
    if cache.activations.len() != layers.len() + 1 {
        return Err(Error::dim(format!(
            "cache holds {} activations for {} layers",
            cache.activations.len(),
            layers.len()
        )));
    }
    if upstream.shape() != cache.output().shape() {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match output {:?}",
            upstream.shape(),
            cache.output().shape()
        )));
    }
    let mut grad = upstream.clone();
    let mut per_layer = Vec::with_capacity(layers.len());
    for (k, layer) in layers.iter().enumerate().rev() {
        let (dx, dparams) = layer.backward(&cache.activations[k], &cache.activations[k + 1], &grad);
        per_layer.push(dparams);
        grad = dx;
    }
    per_layer.reverse();
    Ok(Gradients {
        params: per_layer.into_iter().flatten().collect(),
        input: grad,
    })
}

pub fn parameters(layers: &[Layer]) -> Vec<&Tensor> {
    layers.iter().flat_map(Layer::params).collect()
}

pub fn parameters_mut(layers: &mut [Layer]) -> Vec<&mut Tensor> {
    layers.iter_mut().flat_map(Layer::params_mut).collect()
}

pub fn param_count(layers: &[Layer]) -> usize {
    parameters(layers).iter().map(|t| t.len()).sum()
}

/// Builds `Dense, ReLU, Dense, ReLU, ..., Dense` for the given widths
/// (`widths[0]` inputs, `widths.last()` logits).
pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Vec<Layer>> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::input(format!("invalid layer widths {widths:?}")));
    }
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        layers.push(Layer::dense_init(pair[0], pair[1], rng));
        if i + 2 < widths.len() {
            layers.push(Layer::Relu);
        }
    }
    Ok(layers)
}
