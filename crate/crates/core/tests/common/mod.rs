//! Hand-rolled reference computations shared by the integration tests. They
//! use only the layer primitives, never the split or protocol code paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitsim::data::{Batch, Dataset};
use splitsim::nn::{self, Layer};
use splitsim::split::SplitModel;
use splitsim::Tensor;

pub fn model(widths: &[usize], cut: usize, seed: u64) -> SplitModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SplitModel::new(nn::mlp(widths, &mut rng).unwrap(), cut).unwrap()
}

pub fn random_batch(rows: usize, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Batch {
    let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Batch {
        features: Tensor::new(vec![rows, dim], data).unwrap(),
        labels: (0..rows).map(|_| rng.random_range(0..classes)).collect(),
    }
}

pub fn random_dataset(rows: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = random_batch(rows, dim, classes, &mut rng);
    Dataset::new(b.features, b.labels, classes).unwrap()
}

/// Gradients of one client's mean loss, computed end to end.
pub struct Isolated {
    pub loss: f64,
    pub client: Vec<Tensor>,
    pub server: Vec<Tensor>,
    pub cut: Tensor,
}

pub fn isolated(client: &[Layer], server: &[Layer], batch: &Batch) -> Isolated {
    let hc = nn::forward(client, &batch.features).unwrap();
    let hs = nn::forward(server, hc.output()).unwrap();
    let loss = nn::loss_softmax_ce(hs.output(), &batch.labels).unwrap();
    let gs = nn::backward(server, &hs, &loss.grad).unwrap();
    let gc = nn::backward(client, &hc, &gs.input).unwrap();
    Isolated {
        loss: loss.loss,
        client: gc.params,
        server: gs.params,
        cut: gs.input,
    }
}

/// Client parameter gradients for an externally supplied cut gradient.
pub fn client_grads(client: &[Layer], batch: &Batch, cut: &Tensor) -> Vec<Tensor> {
    let hc = nn::forward(client, &batch.features).unwrap();
    nn::backward(client, &hc, cut).unwrap().params
}

pub fn weighted_sum(parts: &[Vec<Tensor>], weights: &[f64]) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = parts[0].iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (p, &w) in parts.iter().zip(weights) {
        for (o, t) in out.iter_mut().zip(p) {
            o.add_scaled(t, w).unwrap();
        }
    }
    out
}

pub fn sgd_apply(layers: &mut [Layer], grads: &[Tensor], lr: f64) {
    for (p, g) in nn::parameters_mut(layers).into_iter().zip(grads) {
        p.add_scaled(g, -lr).unwrap();
    }
}

pub fn max_param_diff(a: &[Layer], b: &[Layer]) -> f64 {
    nn::parameters(a)
        .into_iter()
        .zip(nn::parameters(b))
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

pub fn params_bitwise_equal(a: &[Layer], b: &[Layer]) -> bool {
    let pa = nn::parameters(a);
    let pb = nn::parameters(b);
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}
