//! Training protocols: SSL, PSL, FL, SFL and the PSL variants with
//! learning-rate splitting (SLR), split-layer gradient averaging (SGL) or
//! both (SGLR).
//!
//! [`rounds`] holds one function per protocol step operating on explicit
//! batches; [`Simulation`] drives them epoch by epoch with seeded batching
//! and active-client sampling.

mod rounds;
mod simulation;

pub use rounds::{
    centralized_step, loc_avg, run_fl_round, run_psl_round, run_sfl_round, run_sglr_round, run_ssl_epoch,
    ClientState, RoundOutcome, ServerState,
};
pub use simulation::{accuracy, evaluate, evaluate_split, EpochMetrics, Simulation};

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Ssl,
    Psl,
    Fl,
    Sfl,
    /// PSL + SplitLr
    Slr,
    /// PSL + SplitAvg
    Sgl,
    /// PSL + SplitLr + SplitAvg
    Sglr,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 7] = [
        ProtocolKind::Ssl,
        ProtocolKind::Psl,
        ProtocolKind::Fl,
        ProtocolKind::Sfl,
        ProtocolKind::Slr,
        ProtocolKind::Sgl,
        ProtocolKind::Sglr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Ssl => "ssl",
            ProtocolKind::Psl => "psl",
            ProtocolKind::Fl => "fl",
            ProtocolKind::Sfl => "sfl",
            ProtocolKind::Slr => "slr",
            ProtocolKind::Sgl => "sgl",
            ProtocolKind::Sglr => "sglr",
        }
    }

    pub fn uses_split_lr(self) -> bool {
        matches!(self, ProtocolKind::Slr | ProtocolKind::Sglr)
    }

    pub fn uses_split_avg(self) -> bool {
        matches!(self, ProtocolKind::Sgl | ProtocolKind::Sglr)
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::input(format!("unknown protocol `{s}`")))
    }
}

/// Which quantity the server learning rate is scaled by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    /// `η_s = η_0 · C^α`
    Clients,
    /// `η_s = η_0 · |B_s|^α` with `|B_s| = b · C`
    EffectiveBatch,
}

/// When SplitAvg is enabled during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSpec {
    Always,
    Never,
    /// First `p` fraction of the epochs.
    Initial(f64),
    /// Last `p` fraction of the epochs.
    Final(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub clients: usize,
    /// φ, fraction of clients receiving the averaged cut gradient.
    pub active_fraction: f64,
    /// α, server learning-rate exponent.
    pub alpha: f64,
    /// η_0
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub phase: PhaseSpec,
    pub seed: u64,
    /// Average the active clients' cut gradients (`true`) or sum them.
    pub splitavg_mean: bool,
    pub lr_scaling: LrScaling,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::Sglr,
            clients: 8,
            active_fraction: 0.5,
            alpha: 0.5,
            base_lr: 1e-3,
            batch_size: 8,
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            phase: PhaseSpec::Always,
            seed: 0,
            splitavg_mean: true,
            lr_scaling: LrScaling::Clients,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("protocol.{field}"), msg));
        if self.clients == 0 {
            return bad("clients", "at least one client is required".into());
        }
        if !(0.0..=1.0).contains(&self.active_fraction) {
            return bad("active_fraction", format!("{} is outside [0, 1]", self.active_fraction));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha", format!("{} must be a nonnegative number", self.alpha));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr", format!("{} must be positive", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if let PhaseSpec::Initial(p) | PhaseSpec::Final(p) = self.phase {
            if !(p > 0.0 && p < 1.0) {
                return bad("phase", format!("fraction {p} must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Learning rates this protocol actually uses.
    pub fn rates(&self) -> LearningRates {
        if self.kind.uses_split_lr() {
            split_lr(self.base_lr, self.clients, self.alpha, self.batch_size, self.lr_scaling)
        } else {
            LearningRates {
                client: self.base_lr,
                server: self.base_lr,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub client: f64,
    pub server: f64,
}

/// SplitLr: clients keep `η_0`, the server scales it by `C^α` (or `|B_s|^α`).
pub fn split_lr(base_lr: f64, clients: usize, alpha: f64, batch_size: usize, scaling: LrScaling) -> LearningRates {
    let base = match scaling {
        LrScaling::Clients => clients as f64,
        LrScaling::EffectiveBatch => (batch_size * clients) as f64,
    };
    LearningRates {
        client: base_lr,
        server: base_lr * base.powf(alpha),
    }
}

/// `round(φ·C)` clients drawn uniformly without replacement, returned in
/// ascending order.
pub fn sample_active_clients<R: Rng + ?Sized>(clients: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::input(format!("active fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * clients as f64).round() as usize;
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut picked = index::sample(rng, clients, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Cut gradients after SplitAvg.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAvg {
    /// The gradient broadcast to the active clients, if any are active.
    pub common: Option<Tensor>,
    /// Gradient each client back-propagates, indexed like the input.
    pub assigned: Vec<Tensor>,
}

/// Active clients receive the combined cut gradient (mean, or plain sum when
/// `mean` is false); everyone else keeps their own.
pub fn split_avg(cut_grads: &[Tensor], active: &[usize], mean: bool) -> Result<SplitAvg> {
    if let Some(&bad) = active.iter().find(|&&i| i >= cut_grads.len()) {
        return Err(Error::input(format!("active client {bad} does not exist")));
    }
    let common = match active.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = cut_grads[first].clone();
            for &i in rest {
                acc.add_scaled(&cut_grads[i], 1.0)?;
            }
            if mean {
                acc.scale(1.0 / active.len() as f64);
            }
            Some(acc)
        }
    };
    let assigned = cut_grads
        .iter()
        .enumerate()
        .map(|(i, g)| match &common {
            Some(c) if active.contains(&i) => c.clone(),
            _ => g.clone(),
        })
        .collect();
    Ok(SplitAvg { common, assigned })
}

/// Whether SplitAvg is on in `epoch` (0-based) out of `epochs`.
pub fn phased_schedule(epoch: usize, epochs: usize, spec: PhaseSpec) -> bool {
    // Guard against p·E landing a hair above an integer.
    const SLACK: f64 = 1e-9;
    match spec {
        PhaseSpec::Always => true,
        PhaseSpec::Never => false,
        PhaseSpec::Initial(p) => (epoch as f64) < (p * epochs as f64 - SLACK).ceil(),
        PhaseSpec::Final(p) => (epoch as f64) >= ((1.0 - p) * epochs as f64 + SLACK).floor(),
    }
}
