//! Experiment plumbing: JSON configs with dotted-path overrides, single runs,
//! seed/grid sweeps, and CSV/JSON-lines output.

mod report;
mod run;

pub use report::{
    default_cost_grid, emit_cost_report, sweep_table_csv, summaries_csv, write_metrics_jsonl, write_run_outputs,
    write_sweep_outputs,
};
pub use run::{
    prepare_data, run_experiment, run_seed, sweep, thread_cap, MetricsRecord, PreparedData, RunOutput, RunSummary,
    SweepCell, SweepOutput,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::comm::CostParams;
use crate::error::{Error, Result};
use crate::leakage;
use crate::protocols::{ProtocolConfig, ProtocolKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Prefix of every run id.
    pub name: String,
    pub protocol: ProtocolConfig,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub cost: CostParams,
    /// One run per seed. Empty means just `protocol.seed`.
    pub seeds: Vec<u64>,
    pub leakage: LeakageSpec,
    /// Grid swept by `sweep`; ignored by single runs.
    pub sweep: SweepGrid,
    /// Adds a wall-clock `timestamp` to every metrics record.
    pub timestamps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            protocol: ProtocolConfig::default(),
            dataset: DatasetSpec::default(),
            model: ModelSpec::default(),
            cost: CostParams::reference(),
            seeds: Vec::new(),
            leakage: LeakageSpec::default(),
            sweep: SweepGrid::default(),
            timestamps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Samples drawn for each client.
    pub per_client: usize,
    /// Samples held out for validation before partitioning.
    pub validation: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                classes: 10,
                per_class: 600,
                dim: 32,
                separation: 4.0,
            },
            per_client: 200,
            validation: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX image and label files, optionally gzip-compressed.
    Idx { images: PathBuf, labels: PathBuf },
    /// Gaussian blobs regenerated from each run's seed.
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
}

/// Dense network `widths[0] → … → widths.last()` with ReLU between layers,
/// split before layer index `cut` of the `Dense, ReLU, …, Dense` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub widths: Vec<usize>,
    pub cut: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 32, 10],
            cut: 2,
        }
    }
}

impl ModelSpec {
    fn layer_count(&self) -> usize {
        2 * self.widths.len().saturating_sub(1) - 1
    }

    /// Width of the smashed data.
    pub fn cut_width(&self) -> usize {
        // layer 2k is dense layer k, whose output is widths[k + 1]
        self.widths[self.cut.div_ceil(2)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeakageSpec {
    pub enabled: bool,
    /// Validation rows fed through client 0's segment.
    pub probe_samples: usize,
    pub units: usize,
    pub bins: usize,
}

impl Default for LeakageSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            probe_samples: 1000,
            units: leakage::DEFAULT_UNITS,
            bins: leakage::DEFAULT_BINS,
        }
    }
}

/// Axes left empty keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub protocols: Vec<ProtocolKind>,
    pub clients: Vec<usize>,
    pub active_fractions: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.protocol.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.cost
            .validate()
            .map_err(|e| Error::config("cost", e.to_string()))?;
        let m = &self.model;
        if m.widths.len() < 3 || m.widths.contains(&0) {
            return Err(Error::config(
                "model.widths",
                format!("{:?}: need input, at least one hidden and an output width, all nonzero", m.widths),
            ));
        }
        if m.cut == 0 || m.cut >= m.layer_count() {
            return Err(Error::config(
                "model.cut",
                format!("{} must lie in 1..{} for {} layers", m.cut, m.layer_count(), m.layer_count()),
            ));
        }
        if self.dataset.per_client < self.protocol.batch_size {
            return Err(Error::config(
                "dataset.per_client",
                format!(
                    "{} samples per client is less than one batch of {}",
                    self.dataset.per_client, self.protocol.batch_size
                ),
            ));
        }
        match &self.dataset.source {
            DataSource::Idx { images, labels } => {
                for (field, p) in [("images", images), ("labels", labels)] {
                    if !p.is_file() {
                        return Err(Error::config(
                            format!("dataset.source.{field}"),
                            format!("{} does not exist", p.display()),
                        ));
                    }
                }
            }
            DataSource::Synthetic {
                classes,
                per_class,
                dim,
                separation,
            } => {
                if *classes < 2 || *per_class == 0 || dim < classes || !(*separation > 0.0) {
                    return Err(Error::config(
                        "dataset.source",
                        "synthetic data needs ≥ 2 classes, samples per class, dim ≥ classes and separation > 0",
                    ));
                }
                if m.widths[0] != *dim || *m.widths.last().unwrap() != *classes {
                    return Err(Error::config(
                        "model.widths",
                        format!("expected {dim} inputs and {classes} outputs, got {:?}", m.widths),
                    ));
                }
            }
        }
        if self.leakage.enabled && (self.leakage.units == 0 || self.leakage.bins < 2 || self.leakage.probe_samples < self.leakage.bins) {
            return Err(Error::config(
                "leakage",
                "needs units ≥ 1, bins ≥ 2 and probe_samples ≥ bins",
            ));
        }
        Ok(())
    }
}

/// Sets `dotted.key` in a JSON tree, creating objects along the way. The
/// value is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "empty path segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut walked = Vec::new();
    for segment in key.split('.') {
        if !node.is_object() {
            return Err(Error::config(walked.join("."), "is not an object"));
        }
        walked.push(segment);
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(segment)
            .or_insert(Value::Object(Default::default()));
    }
    *node = value;
    Ok(())
}

/// Deserializes a config tree, reporting the failing field's dotted path.
pub fn config_from_value(value: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

/// Reads `path` (or starts from the defaults), applies `overrides` in order
/// and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config = config_from_value(value)?;
    config.validate()?;
    Ok(config)
}
