use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::{DataSource, ExperimentConfig};
use crate::data::{load_idx, partition_iid, split_validation, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::leakage::smashed_leakage_score;
use crate::nn;
use crate::protocols::{ProtocolKind, Simulation};
use crate::rng::{stream, Stream};
use crate::split::SplitModel;

/// One line of the metrics stream: a run's state after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub protocol: ProtocolKind,
    pub clients: usize,
    pub active_fraction: f64,
    pub alpha: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub server_lr: f64,
    /// Ledger bytes so far.
    pub comm_bytes: u64,
    /// Only on the final epoch, when enabled.
    pub leakage: Option<f64>,
    /// Seconds since the Unix epoch; the only nondeterministic field.
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub protocol: ProtocolKind,
    pub clients: usize,
    pub active_fraction: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
    pub final_loss: f64,
    pub comm_bytes: u64,
    pub leakage: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// Mean and spread over the seeds of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub protocol: ProtocolKind,
    pub clients: usize,
    pub active_fraction: f64,
    pub alpha: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub runs: Vec<RunOutput>,
    pub cells: Vec<SweepCell>,
}

/// Data loaded once and shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    base: Option<Dataset>,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let base = match &config.dataset.source {
        DataSource::Idx { images, labels } => Some(load_idx(images, labels)?),
        DataSource::Synthetic { .. } => None,
    };
    Ok(PreparedData { base })
}

/// Per-client shards and the validation set for one seed.
fn materialize(config: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<(Vec<Dataset>, Option<Dataset>)> {
    let generated;
    let dataset = match (&data.base, &config.dataset.source) {
        (Some(d), _) => d,
        (None, DataSource::Synthetic { classes, per_class, dim, separation }) => {
            generated = synth_dataset(*classes, *per_class, *dim, *separation, seed)?;
            &generated
        }
        (None, DataSource::Idx { .. }) => return Err(Error::input("IDX data was not prepared")),
    };
    let widths = &config.model.widths;
    if dataset.dim() != widths[0] || dataset.classes > *widths.last().unwrap() {
        return Err(Error::config(
            "model.widths",
            format!(
                "data has {} features and {} classes, model is {widths:?}",
                dataset.dim(),
                dataset.classes
            ),
        ));
    }
    let split = split_validation(dataset, config.dataset.validation, seed)
        .map_err(|e| Error::config("dataset.validation", e.to_string()))?;
    let partition = partition_iid(&split.train, config.protocol.clients, config.dataset.per_client, seed)
        .map_err(|e| Error::config("dataset.per_client", e.to_string()))?;
    let shards = partition
        .clients
        .iter()
        .map(|idx| split.train.subset(idx))
        .collect::<Result<_>>()?;
    Ok((shards, split.validation))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn run_id(config: &ExperimentConfig, seed: u64) -> String {
    let p = &config.protocol;
    format!(
        "{}-{}-c{}-phi{}-a{}-s{seed}",
        config.name, p.kind, p.clients, p.active_fraction, p.alpha
    )
}

/// Trains one seed of `config` end to end.
pub fn run_seed(config: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<RunOutput> {
    let (shards, validation) = materialize(config, data, seed)?;
    let mut protocol = config.protocol.clone();
    protocol.seed = seed;
    let layers = nn::mlp(&config.model.widths, &mut stream(seed, Stream::Init))?;
    let model = SplitModel::new(layers, config.model.cut).map_err(|e| Error::config("model.cut", e.to_string()))?;
    // without a validation set, leakage is probed on client 0's own data
    let probe = config
        .leakage
        .enabled
        .then(|| validation.clone().unwrap_or_else(|| shards[0].clone()));
    let mut sim = Simulation::new(protocol.clone(), model, shards)?;

    let id = run_id(config, seed);
    let mut records = Vec::with_capacity(protocol.epochs);
    for _ in 0..protocol.epochs {
        let m = sim.run_epoch()?;
        let val_accuracy = validation.as_ref().map(|v| sim.evaluate(v)).transpose()?;
        records.push(MetricsRecord {
            run_id: id.clone(),
            seed,
            epoch: m.epoch,
            protocol: protocol.kind,
            clients: protocol.clients,
            active_fraction: protocol.active_fraction,
            alpha: protocol.alpha,
            train_loss: m.train_loss,
            val_accuracy,
            server_lr: m.server_lr,
            comm_bytes: sim.ledger().total_bytes(),
            leakage: None,
            timestamp: config.timestamps.then(now),
        });
    }

    let leakage = if let Some(probe) = probe {
        let rows = config.leakage.probe_samples.min(probe.len());
        let inputs = probe.features.slice_rows(0, rows)?;
        let segment = &sim.client_model(0)[..config.model.cut];
        let report = smashed_leakage_score(
            segment,
            &inputs,
            config.leakage.units,
            config.leakage.bins,
            &mut stream(seed, Stream::Leakage),
        )?;
        Some(report.score)
    } else {
        None
    };
    let last = records.last_mut().expect("at least one epoch");
    last.leakage = leakage;
    let summary = RunSummary {
        run_id: id,
        seed,
        protocol: protocol.kind,
        clients: protocol.clients,
        active_fraction: protocol.active_fraction,
        alpha: protocol.alpha,
        epochs: protocol.epochs,
        final_accuracy: last.val_accuracy,
        final_loss: last.train_loss,
        comm_bytes: last.comm_bytes,
        leakage,
    };
    Ok(RunOutput { records, summary })
}

/// Parallel runs allowed: `SPLITSIM_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("SPLITSIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Runs `f` over `jobs` on up to `threads` threads; results keep job order.
fn parallel_map<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let out = f(job);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Runs every seed of `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    config.validate()?;
    let data = prepare_data(config)?;
    parallel_map(&config.seeds(), thread_cap(), |&seed| run_seed(config, &data, seed))
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Every combination of the grid axes, each over every seed.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepOutput> {
    config.validate()?;
    let g = &config.sweep;
    let p = &config.protocol;
    let mut cells = Vec::new();
    for kind in axis(&g.protocols, p.kind) {
        for clients in axis(&g.clients, p.clients) {
            for phi in axis(&g.active_fractions, p.active_fraction) {
                for alpha in axis(&g.alphas, p.alpha) {
                    let mut c = config.clone();
                    c.protocol.kind = kind;
                    c.protocol.clients = clients;
                    c.protocol.active_fraction = phi;
                    c.protocol.alpha = alpha;
                    c.validate()?;
                    cells.push(c);
                }
            }
        }
    }
    let seeds = config.seeds();
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let data = prepare_data(config)?;
    let runs = parallel_map(&jobs, thread_cap(), |&(c, seed)| run_seed(&cells[c], &data, seed))?;

    let aggregated = cells
        .iter()
        .zip(runs.chunks(seeds.len()))
        .map(|(c, group)| {
            let acc: Vec<f64> = group.iter().map(|r| r.summary.final_accuracy.unwrap_or(f64::NAN)).collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SweepCell {
                protocol: c.protocol.kind,
                clients: c.protocol.clients,
                active_fraction: c.protocol.active_fraction,
                alpha: c.protocol.alpha,
                runs: group.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                mean_loss: group.iter().map(|r| r.summary.final_loss).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(SweepOutput { runs, cells: aggregated })
}
