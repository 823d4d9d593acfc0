use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::rounds::{run_fl_round, run_sfl_round, run_sglr_round, run_ssl_epoch, ClientState, ServerState};
use super::{phased_schedule, sample_active_clients, LearningRates, ProtocolConfig, ProtocolKind};
use crate::comm::CommLedger;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, Layer};
use crate::rng::{stream, Stream};
use crate::split::SplitModel;
use crate::tensor::Tensor;

/// Rows evaluated per forward pass.
const EVAL_CHUNK: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Top-1 accuracy on the validation set, when one was given.
    pub val_accuracy: Option<f64>,
    pub server_lr: f64,
    /// Active clients of the epoch's last round.
    pub active: Vec<usize>,
    /// Server steps taken so far.
    pub steps: u64,
}

/// A protocol run over per-client shards.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: ProtocolConfig,
    rates: LearningRates,
    clients: Vec<ClientState>,
    /// Absent under FL.
    server: Option<ServerState>,
    shards: Vec<Dataset>,
    shuffles: Vec<ChaCha8Rng>,
    active_rng: ChaCha8Rng,
    ledger: CommLedger,
    epoch: usize,
    steps: u64,
}

impl Simulation {
    /// Every client starts from the same copy of the model's client segment
    /// (the full model under FL). `shards[i]` is client `i`'s local data and
    /// must hold at least one full batch.
    pub fn new(config: ProtocolConfig, model: SplitModel, shards: Vec<Dataset>) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.clients {
            return Err(Error::input(format!(
                "{} shards for {} clients",
                shards.len(),
                config.clients
            )));
        }
        if let Some(short) = shards.iter().position(|s| s.len() < config.batch_size) {
            return Err(Error::input(format!(
                "client {short} holds {} samples, fewer than the batch size {}",
                shards[short].len(),
                config.batch_size
            )));
        }
        let total: usize = shards.iter().map(Dataset::len).sum();
        let deltas: Vec<f64> = shards.iter().map(|s| s.len() as f64 / total as f64).collect();

        let (client_layers, server) = if config.kind == ProtocolKind::Fl {
            (model.layers().to_vec(), None)
        } else {
            let (c, s) = model.into_segments();
            (c, Some(ServerState::new(s, config.optimizer)))
        };
        let clients = deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| ClientState::new(i, client_layers.clone(), config.optimizer, d))
            .collect();
        let shuffles = (0..config.clients).map(|i| stream(config.seed, Stream::Client(i))).collect();
        Ok(Self {
            rates: config.rates(),
            active_rng: stream(config.seed, Stream::ActiveClients),
            config,
            clients,
            server,
            shards,
            shuffles,
            ledger: CommLedger::new(),
            epoch: 0,
            steps: 0,
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn rates(&self) -> LearningRates {
        self.rates
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> Option<&ServerState> {
        self.server.as_ref()
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Epochs completed.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Server steps taken (local steps under FL).
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Client `i`'s end-to-end model: its segment followed by the server's.
    pub fn client_model(&self, i: usize) -> Vec<Layer> {
        let mut layers = self.clients[i].layers.clone();
        if let Some(server) = &self.server {
            layers.extend(server.layers.iter().cloned());
        }
        layers
    }

    fn shuffled_batches(&mut self) -> Result<Vec<Vec<Batch>>> {
        let b = self.config.batch_size;
        self.shards
            .iter()
            .zip(&mut self.shuffles)
            .map(|(shard, rng)| {
                let mut order: Vec<usize> = (0..shard.len()).collect();
                order.shuffle(rng);
                order.chunks_exact(b).map(|idx| shard.batch(idx)).collect()
            })
            .collect()
    }

    /// Runs one epoch. Round-based protocols run `min_i ⌊|D_i| / b⌋` rounds;
    /// leftover samples are skipped.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let mut per_client = self.shuffled_batches()?;
        let epoch = self.epoch;
        let mut last_active = Vec::new();
        let train_loss = if self.config.kind == ProtocolKind::Ssl {
            let server = self.server.as_mut().expect("split protocol has a server");
            run_ssl_epoch(
                &mut self.clients,
                server,
                &per_client,
                self.rates.server,
                &mut self.ledger,
                &mut self.steps,
            )?
        } else {
            let rounds = per_client.iter().map(Vec::len).min().unwrap_or(0);
            let averaging = self.config.kind.uses_split_avg()
                && phased_schedule(epoch, self.config.epochs, self.config.phase);
            let mut loss_sum = 0.0;
            for r in 0..rounds {
                let batches: Vec<Batch> = per_client
                    .iter_mut()
                    .map(|list| std::mem::replace(&mut list[r], empty_batch()))
                    .collect();
                let round = self.steps;
                let outcome = match self.config.kind {
                    ProtocolKind::Fl => run_fl_round(&mut self.clients, &batches, self.rates.client, &mut self.ledger, round)?,
                    ProtocolKind::Sfl => {
                        let server = self.server.as_mut().expect("split protocol has a server");
                        run_sfl_round(&mut self.clients, server, &batches, self.rates.client, &mut self.ledger, round)?
                    }
                    _ => {
                        let active = if averaging {
                            sample_active_clients(self.config.clients, self.config.active_fraction, &mut self.active_rng)?
                        } else {
                            Vec::new()
                        };
                        let server = self.server.as_mut().expect("split protocol has a server");
                        run_sglr_round(
                            &mut self.clients,
                            server,
                            &batches,
                            self.rates,
                            &active,
                            self.config.splitavg_mean,
                            &mut self.ledger,
                            round,
                        )?
                    }
                };
                loss_sum += outcome.loss;
                last_active = outcome.active;
                self.steps += 1;
            }
            if rounds == 0 {
                0.0
            } else {
                loss_sum / rounds as f64
            }
        };
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy: None,
            server_lr: self.rates.server,
            active: last_active,
            steps: self.steps,
        })
    }

    /// Runs the configured number of epochs, evaluating client 0's model on
    /// `validation` after each.
    pub fn train(&mut self, validation: Option<&Dataset>) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let mut m = self.run_epoch()?;
            if let Some(val) = validation {
                m.val_accuracy = Some(self.evaluate(val)?);
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Top-1 accuracy of client 0's end-to-end model.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        match &self.server {
            Some(server) => evaluate_split(&self.clients[0].layers, &server.layers, data),
            None => evaluate(&self.clients[0].layers, data),
        }
    }
}

fn empty_batch() -> Batch {
    Batch {
        features: Tensor::zeros(&[1, 1]),
        labels: Vec::new(),
    }
}

/// Fraction of rows whose largest logit sits at the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::input("accuracy of an empty set"));
    }
    let hits = labels.iter().enumerate().filter(|&(r, &y)| logits.argmax_row(r) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(layers: &[Layer], data: &Dataset) -> Result<f64> {
    evaluate_split(layers, &[], data)
}

/// Accuracy of `client` followed by `server`, evaluated in chunks.
pub fn evaluate_split(client: &[Layer], server: &[Layer], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("accuracy of an empty set"));
    }
    let mut hits = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let x = data.features.slice_rows(start, end)?;
        let logits = nn::predict(server, &nn::predict(client, &x)?)?;
        hits += (start..end).filter(|&r| logits.argmax_row(r - start) == data.labels[r]).count();
        start = end;
    }
    Ok(hits as f64 / data.len() as f64)
}
