//! Cut-layer partitioning and the server side of a parallel split-learning round.
//!
//! Clients push their batch through the lower segment and upload the
//! resulting [`SmashedBatch`]. The server stacks every upload into one
//! [`ConcatBatch`] (rows ordered by ascending client id), runs one forward and
//! one backward pass over the upper segment, and hands each client back its
//! own slice of the cut-layer gradient.
//!
//! Loss convention: the rows of client `i` contribute their mean
//! cross-entropy weighted by `δ_i`, i.e. `L = Σ_i δ_i · mean_{j∈B_i} CE_j`.
//! The server parameter gradient is therefore `Σ_i δ_i g_{s,i}` and the slice
//! returned to client `i` already carries the factor `δ_i`.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, ActivationCache, Layer, OptimizerState};
use crate::tensor::Tensor;

/// A layer stack partitioned after layer `cut`: `layers[..cut]` runs on the
/// clients, `layers[cut..]` on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    layers: Vec<Layer>,
    cut: usize,
}

impl SplitModel {
    pub fn new(layers: Vec<Layer>, cut: usize) -> Result<Self> {
        if cut == 0 || cut >= layers.len() {
            return Err(Error::input(format!(
                "cut index {cut} must satisfy 1 <= cut < {}",
                layers.len()
            )));
        }
        check_stack(&layers)?;
        Ok(Self { layers, cut })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn cut(&self) -> usize {
        self.cut
    }

    pub fn client_segment(&self) -> &[Layer] {
        &self.layers[..self.cut]
    }

    pub fn server_segment(&self) -> &[Layer] {
        &self.layers[self.cut..]
    }

    pub fn into_segments(mut self) -> (Vec<Layer>, Vec<Layer>) {
        let server = self.layers.split_off(self.cut);
        (self.layers, server)
    }

    /// Width of the smashed data: the last dense output inside the client segment.
    pub fn cut_width(&self) -> Option<usize> {
        stack_output_dim(self.client_segment())
    }
}

/// Output width of a stack, if it contains at least one dense layer.
pub fn stack_output_dim(layers: &[Layer]) -> Option<usize> {
    layers.iter().rev().find_map(Layer::output_dim)
}

/// Checks that consecutive dense layers agree on their shared width.
pub fn check_stack(layers: &[Layer]) -> Result<()> {
    let mut width: Option<usize> = None;
    for (k, layer) in layers.iter().enumerate() {
        if let (Some(w), Some(i)) = (width, layer.input_dim()) {
            if w != i {
                return Err(Error::dim(format!("layer {k} expects {i} inputs but receives {w}")));
            }
        }
        if let Some(o) = layer.output_dim() {
            width = Some(o);
        }
    }
    Ok(())
}

/// Smashed data uploaded by one client together with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedBatch {
    pub client_id: usize,
    pub smashed: Tensor,
    pub labels: Vec<usize>,
}

impl SmashedBatch {
    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }
}

/// Server-side stacking of all uploads of a round.
#[derive(Debug, Clone)]
pub struct ConcatBatch {
    parts: Vec<SmashedBatch>,
    offsets: Vec<usize>,
    smashed: Tensor,
    labels: Vec<usize>,
}

impl ConcatBatch {
    pub fn parts(&self) -> &[SmashedBatch] {
        &self.parts
    }

    pub fn client_ids(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.client_id).collect()
    }

    /// Row offsets of each part; `offsets[k]..offsets[k + 1]` belongs to part `k`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn smashed(&self) -> &Tensor {
        &self.smashed
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `|B_s| = Σ_i |B_i|`
    pub fn effective_size(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

/// Runs a client's lower segment on its batch. The activation cache stays on
/// the client for the backward pass.
pub fn client_forward(client_id: usize, layers: &[Layer], batch: &Batch) -> Result<(SmashedBatch, ActivationCache)> {
    if batch.labels.is_empty() {
        return Err(Error::dim("empty batch"));
    }
    if batch.features.rows() != batch.labels.len() {
        return Err(Error::dim(format!(
            "{} feature rows but {} labels",
            batch.features.rows(),
            batch.labels.len()
        )));
    }
    let cache = nn::forward(layers, &batch.features)?;
    let smashed = SmashedBatch {
        client_id,
        smashed: cache.output().clone(),
        labels: batch.labels.clone(),
    };
    Ok((smashed, cache))
}

/// Stacks uploads along the batch dimension in ascending client id order.
pub fn concat(mut batches: Vec<SmashedBatch>) -> Result<ConcatBatch> {
    if batches.is_empty() {
        return Err(Error::dim("no smashed batches to concatenate"));
    }
    batches.sort_by_key(|b| b.client_id);
    if batches.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::input("duplicate client id in round"));
    }
    for b in &batches {
        if b.smashed.rows() != b.labels.len() {
            return Err(Error::dim(format!(
                "client {} uploaded {} rows with {} labels",
                b.client_id,
                b.smashed.rows(),
                b.labels.len()
            )));
        }
    }
    let smashed = Tensor::concat_rows(&batches.iter().map(|b| &b.smashed).collect::<Vec<_>>())?;
    let mut offsets = Vec::with_capacity(batches.len() + 1);
    offsets.push(0);
    let mut labels = Vec::with_capacity(smashed.rows());
    for b in &batches {
        offsets.push(offsets.last().unwrap() + b.sample_count());
        labels.extend_from_slice(&b.labels);
    }
    Ok(ConcatBatch {
        parts: batches,
        offsets,
        smashed,
        labels,
    })
}

/// Result of the server's pass over a round.
#[derive(Debug, Clone)]
pub struct ServerStep {
    /// `Σ_i δ_i · mean CE over client i's rows`
    pub loss: f64,
    /// Cut-layer gradient slice per part, in [`ConcatBatch::parts`] order.
    pub cut_grads: Vec<Tensor>,
    /// `Σ_i δ_i g_{s,i}`, ordered as [`nn::parameters`] of the server segment.
    pub param_grads: Vec<Tensor>,
}

fn check_deltas(deltas: &[f64], parts: usize) -> Result<()> {
    if deltas.len() != parts {
        return Err(Error::input(format!("{} δ weights for {parts} clients", deltas.len())));
    }
    if deltas.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::input("δ weights must be finite and nonnegative"));
    }
    let sum: f64 = deltas.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("δ weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Forward and backward over the concatenated batch without updating weights.
pub fn server_gradients(layers: &[Layer], concat: &ConcatBatch, deltas: &[f64]) -> Result<ServerStep> {
    check_deltas(deltas, concat.parts.len())?;
    let mut row_weights = Vec::with_capacity(concat.effective_size());
    for (part, &delta) in concat.parts.iter().zip(deltas) {
        let w = delta * (1.0 / part.sample_count() as f64);
        row_weights.extend(std::iter::repeat_n(w, part.sample_count()));
    }
    let cache = nn::forward(layers, &concat.smashed)?;
    let loss = nn::softmax_ce_weighted(cache.output(), &concat.labels, &row_weights)?;
    let grads = nn::backward(layers, &cache, &loss.grad)?;
    let cut_grads = concat
        .offsets
        .windows(2)
        .map(|w| grads.input.slice_rows(w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ServerStep {
        loss: loss.loss,
        cut_grads,
        param_grads: grads.params,
    })
}

/// One server round: forward/backward over the stacked batch, then a single
/// optimizer step with learning rate `lr` using the δ-combined gradient.
pub fn server_forward_backward(
    layers: &mut [Layer],
    optimizer: &mut OptimizerState,
    concat: &ConcatBatch,
    deltas: &[f64],
    lr: f64,
) -> Result<ServerStep> {
    let step = server_gradients(layers, concat, deltas)?;
    optimizer.step(layers, &step.param_grads, lr)?;
    Ok(step)
}
