use serde::Serialize;

use super::{split_avg, LearningRates};
use crate::comm::{CommLedger, Direction, Payload};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, ActivationCache, Layer, OptimizerKind, OptimizerState};
use crate::split;
use crate::tensor::Tensor;

/// A client's trainable segment (the whole model under FL) and its optimizer.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub layers: Vec<Layer>,
    pub optimizer: OptimizerState,
    /// Share of the training data this client holds.
    pub delta: f64,
}

impl ClientState {
    pub fn new(id: usize, layers: Vec<Layer>, optimizer: OptimizerKind, delta: f64) -> Self {
        let optimizer = OptimizerState::new(optimizer, &layers);
        Self {
            id,
            layers,
            optimizer,
            delta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub layers: Vec<Layer>,
    pub optimizer: OptimizerState,
}

impl ServerState {
    pub fn new(layers: Vec<Layer>, optimizer: OptimizerKind) -> Self {
        let optimizer = OptimizerState::new(optimizer, &layers);
        Self { layers, optimizer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundOutcome {
    /// δ-weighted training loss before the update.
    pub loss: f64,
    pub server_lr: f64,
    pub active: Vec<usize>,
}

fn check_batches(clients: &[ClientState], batches: &[Batch]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::input("a round needs at least one client"));
    }
    if clients.len() != batches.len() {
        return Err(Error::input(format!(
            "{} clients but {} batches",
            clients.len(),
            batches.len()
        )));
    }
    Ok(())
}

fn client_step(client: &mut ClientState, cache: &ActivationCache, cut_grad: &Tensor, lr: f64) -> Result<()> {
    let grads = nn::backward(&client.layers, cache, cut_grad)?;
    client.optimizer.step(&mut client.layers, &grads.params, lr)
}

/// PSL round: every client back-propagates its own cut gradient, and both
/// sides use the same learning rate.
pub fn run_psl_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    batches: &[Batch],
    lr: f64,
    ledger: &mut CommLedger,
    round: u64,
) -> Result<RoundOutcome> {
    let rates = LearningRates { client: lr, server: lr };
    run_sglr_round(clients, server, batches, rates, &[], true, ledger, round)
}

/// The general split round. Clients listed in `active` (ascending ids,
/// indices into `clients`) receive the averaged cut gradient as one broadcast;
/// the rest get their own slice. With `active` empty and equal rates this is
/// exactly a PSL round.
#[allow(clippy::too_many_arguments)]
pub fn run_sglr_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    batches: &[Batch],
    rates: LearningRates,
    active: &[usize],
    splitavg_mean: bool,
    ledger: &mut CommLedger,
    round: u64,
) -> Result<RoundOutcome> {
    check_batches(clients, batches)?;
    let mut smashed = Vec::with_capacity(clients.len());
    let mut caches = Vec::with_capacity(clients.len());
    for (i, (client, batch)) in clients.iter().zip(batches).enumerate() {
        // ids double as positions so the concatenation order is the client order
        let (s, cache) = split::client_forward(i, &client.layers, batch)?;
        ledger.record(round, Some(client.id), Direction::Upload, Payload::Smashed, s.smashed.len());
        smashed.push(s);
        caches.push(cache);
    }
    let concat = split::concat(smashed)?;
    let deltas: Vec<f64> = clients.iter().map(|c| c.delta).collect();
    let step = split::server_forward_backward(
        &mut server.layers,
        &mut server.optimizer,
        &concat,
        &deltas,
        rates.server,
    )?;

    let averaged = split_avg(&step.cut_grads, active, splitavg_mean)?;
    if let Some(common) = &averaged.common {
        ledger.record(round, None, Direction::Download, Payload::CutGradient, common.len());
    }
    for (i, client) in clients.iter().enumerate() {
        if averaged.common.is_none() || !active.contains(&i) {
            ledger.record(round, Some(client.id), Direction::Download, Payload::CutGradient, step.cut_grads[i].len());
        }
    }
    for ((client, cache), grad) in clients.iter_mut().zip(&caches).zip(&averaged.assigned) {
        client_step(client, cache, grad, rates.client)?;
    }
    Ok(RoundOutcome {
        loss: step.loss,
        server_lr: rates.server,
        active: active.to_vec(),
    })
}

/// Replaces every client's weights with `Σ_k δ_k w_k`. Optimizer states stay
/// local.
pub fn loc_avg(clients: &mut [ClientState]) -> Result<()> {
    let Some(first) = clients.first() else {
        return Ok(());
    };
    let mut avg: Vec<Tensor> = nn::parameters(&first.layers)
        .into_iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    for client in clients.iter() {
        let params = nn::parameters(&client.layers);
        if params.len() != avg.len() {
            return Err(Error::dim("clients hold different architectures"));
        }
        for (a, p) in avg.iter_mut().zip(params) {
            a.add_scaled(p, client.delta)?;
        }
    }
    for client in clients.iter_mut() {
        for (p, a) in nn::parameters_mut(&mut client.layers).into_iter().zip(&avg) {
            p.data_mut().copy_from_slice(a.data());
        }
    }
    Ok(())
}

fn record_weight_exchange(clients: &[ClientState], ledger: &mut CommLedger, round: u64) {
    for c in clients {
        let n = nn::param_count(&c.layers);
        ledger.record(round, Some(c.id), Direction::Upload, Payload::ModelWeights, n);
        ledger.record(round, Some(c.id), Direction::Download, Payload::ModelWeights, n);
    }
    ledger.mark_sync();
}

/// SFL round: a PSL round followed by averaging the client segments.
pub fn run_sfl_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    batches: &[Batch],
    lr: f64,
    ledger: &mut CommLedger,
    round: u64,
) -> Result<RoundOutcome> {
    let outcome = run_psl_round(clients, server, batches, lr, ledger, round)?;
    loc_avg(clients)?;
    record_weight_exchange(clients, ledger, round);
    Ok(outcome)
}

/// FL round: each client holds the full model, takes one local step, then the
/// weights are averaged.
pub fn run_fl_round(clients: &mut [ClientState], batches: &[Batch], lr: f64, ledger: &mut CommLedger, round: u64) -> Result<RoundOutcome> {
    check_batches(clients, batches)?;
    let mut loss = 0.0;
    for (client, batch) in clients.iter_mut().zip(batches) {
        loss += client.delta * centralized_step(&mut client.layers, &mut client.optimizer, batch, lr)?;
    }
    loc_avg(clients)?;
    record_weight_exchange(clients, ledger, round);
    Ok(RoundOutcome {
        loss,
        server_lr: lr,
        active: Vec::new(),
    })
}

/// One SSL epoch. Clients train in id order, each starting from the
/// previous client's segment and optimizer state; afterwards every client
/// holds the final state. `batches[i]` are client `i`'s batches.
/// `round` is advanced once per server step. Returns the mean batch loss.
pub fn run_ssl_epoch(
    clients: &mut [ClientState],
    server: &mut ServerState,
    batches: &[Vec<Batch>],
    lr: f64,
    ledger: &mut CommLedger,
    round: &mut u64,
) -> Result<f64> {
    if clients.is_empty() || clients.len() != batches.len() {
        return Err(Error::input(format!(
            "{} clients but {} batch lists",
            clients.len(),
            batches.len()
        )));
    }
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for i in 0..clients.len() {
        if i > 0 {
            let (done, rest) = clients.split_at_mut(i);
            rest[0].layers.clone_from(&done[i - 1].layers);
            rest[0].optimizer.clone_from(&done[i - 1].optimizer);
        }
        let client = &mut clients[i];
        let weights = nn::param_count(&client.layers);
        ledger.record(*round, Some(client.id), Direction::Download, Payload::ModelWeights, weights);
        for batch in &batches[i] {
            let (s, cache) = split::client_forward(0, &client.layers, batch)?;
            ledger.record(*round, Some(client.id), Direction::Upload, Payload::Smashed, s.smashed.len());
            let concat = split::concat(vec![s])?;
            let step = split::server_forward_backward(&mut server.layers, &mut server.optimizer, &concat, &[1.0], lr)?;
            ledger.record(*round, Some(client.id), Direction::Download, Payload::CutGradient, step.cut_grads[0].len());
            client_step(client, &cache, &step.cut_grads[0], lr)?;
            loss_sum += step.loss;
            steps += 1;
            *round += 1;
        }
        ledger.record(*round, Some(client.id), Direction::Upload, Payload::ModelWeights, weights);
    }
    let (last, rest) = clients.split_last_mut().expect("nonempty");
    for c in rest {
        c.layers.clone_from(&last.layers);
        c.optimizer.clone_from(&last.optimizer);
    }
    ledger.mark_sync();
    Ok(if steps == 0 { 0.0 } else { loss_sum / steps as f64 })
}

/// One step of ordinary (unsplit) training on a batch; returns the loss.
pub fn centralized_step(layers: &mut [Layer], optimizer: &mut OptimizerState, batch: &Batch, lr: f64) -> Result<f64> {
    let cache = nn::forward(layers, &batch.features)?;
    let loss = nn::loss_softmax_ce(cache.output(), &batch.labels)?;
    let grads = nn::backward(layers, &cache, &loss.grad)?;
    optimizer.step(layers, &grads.params, lr)?;
    Ok(loss.loss)
}
