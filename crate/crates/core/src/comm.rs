//! Communication overhead and training time per epoch, in closed form, plus
//! a byte ledger filled in by the protocol engines.
//!
//! Notation of [`CostParams`]: `S_L` is the cut-layer output per sample,
//! `S_w` the full model, `S_wc` the client segment (all in MB), `D` the total
//! number of training samples, `C` the number of clients, `φ` the active
//! fraction, `R` the link rate in MB/s and `T` the compute time of one
//! forward+backward pass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_MB: f64 = 1e6;
pub const BYTES_PER_SCALAR: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fl,
    Ssl,
    /// An extension of the four-method cost table; modeled as SGLR with `φ = 0`
    /// and no broadcast term.
    Psl,
    Sfl,
    Sglr,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fl, Method::Ssl, Method::Psl, Method::Sfl, Method::Sglr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fl => "FL",
            Method::Ssl => "SSL",
            Method::Psl => "PSL",
            Method::Sfl => "SFL",
            Method::Sglr => "SGLR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fl" => Ok(Method::Fl),
            "ssl" | "sl" => Ok(Method::Ssl),
            "psl" => Ok(Method::Psl),
            "sfl" => Ok(Method::Sfl),
            "sglr" => Ok(Method::Sglr),
            other => Err(Error::input(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// `S_L`, MB per sample
    pub cut_output_mb: f64,
    /// `S_w`, MB
    pub model_mb: f64,
    /// `S_wc`, MB
    pub client_model_mb: f64,
    /// `|D|`
    pub dataset_size: f64,
    /// `|C|`
    pub clients: f64,
    /// `φ`
    pub active_fraction: f64,
    /// `R`, MB/s
    pub rate_mb_per_s: f64,
    /// `T`, seconds
    pub compute_s: f64,
}

impl CostParams {
    /// AlexNet-sized setting: 100 clients, φ = 0.5, 50 000 samples,
    /// `S_L` = 0.024 MB, `S_w` = 200 MB, `S_wc` = 67 MB. Rate and compute
    /// time are not part of that setting; 10 MB/s and 1 s are placeholders.
    pub fn reference() -> Self {
        Self {
            cut_output_mb: 0.024,
            model_mb: 200.0,
            client_model_mb: 67.0,
            dataset_size: 50_000.0,
            clients: 100.0,
            active_fraction: 0.5,
            rate_mb_per_s: 10.0,
            compute_s: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cut_output_mb", self.cut_output_mb),
            ("model_mb", self.model_mb),
            ("client_model_mb", self.client_model_mb),
            ("dataset_size", self.dataset_size),
            ("clients", self.clients),
            ("rate_mb_per_s", self.rate_mb_per_s),
            ("compute_s", self.compute_s),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::input(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.clients < 1.0 {
            return Err(Error::input("at least one client is required"));
        }
        if !(0.0..=1.0).contains(&self.active_fraction) {
            return Err(Error::input(format!(
                "active fraction must lie in [0, 1], got {}",
                self.active_fraction
            )));
        }
        Ok(())
    }
}

impl Default for CostParams {
    fn default() -> Self {
        Self::reference()
    }
}

/// Megabytes exchanged per client per epoch.
pub fn comm_per_client(method: Method, p: &CostParams) -> Result<f64> {
    p.validate()?;
    let (d, sl, c) = (p.dataset_size, p.cut_output_mb, p.clients);
    Ok(match method {
        Method::Fl => 2.0 * p.model_mb,
        Method::Ssl | Method::Sfl => 2.0 * d * sl / c + 2.0 * p.client_model_mb,
        Method::Psl => 2.0 * d * sl / c,
        Method::Sglr => ((2.0 - p.active_fraction) * d * sl + sl) / c,
    })
}

/// Megabytes exchanged per epoch summed over all clients.
pub fn total_comm(method: Method, p: &CostParams) -> Result<f64> {
    p.validate()?;
    let (d, sl, c) = (p.dataset_size, p.cut_output_mb, p.clients);
    Ok(match method {
        Method::Fl => 2.0 * c * p.model_mb,
        Method::Ssl | Method::Sfl => 2.0 * d * sl + 2.0 * c * p.client_model_mb,
        Method::Psl => 2.0 * d * sl,
        Method::Sglr => (2.0 - p.active_fraction) * d * sl + sl,
    })
}

/// `100 · (1 − total(a)/total(b))`
pub fn reduction_percent(a: Method, b: Method, p: &CostParams) -> Result<f64> {
    let tb = total_comm(b, p)?;
    if tb <= 0.0 {
        return Err(Error::input(format!("{b} communicates nothing; reduction undefined")));
    }
    Ok(100.0 * (1.0 - total_comm(a, p)? / tb))
}

/// Seconds per epoch: compute time plus transfer time at rate `R`.
///
/// SSL pays the model hand-off once per client, serially, while SFL clients
/// exchange their segments in parallel.
pub fn training_time(method: Method, p: &CostParams) -> Result<f64> {
    p.validate()?;
    if p.rate_mb_per_s <= 0.0 {
        return Err(Error::input("link rate must be positive"));
    }
    let (d, sl, c, r, t) = (p.dataset_size, p.cut_output_mb, p.clients, p.rate_mb_per_s, p.compute_s);
    Ok(match method {
        Method::Fl => t + 2.0 * p.model_mb / r,
        Method::Ssl => t + 2.0 * d * sl / r + 2.0 * c * p.client_model_mb / r,
        Method::Sfl => t + 2.0 * d * sl / (c * r) + 2.0 * p.client_model_mb / r,
        Method::Psl => t + 2.0 * d * sl / (c * r),
        Method::Sglr => t + ((2.0 - p.active_fraction) * d * sl + sl) / (c * r),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Smashed,
    CutGradient,
    ModelWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: u64,
    /// `None` marks a broadcast: one transmission received by several clients.
    pub client: Option<usize>,
    pub direction: Direction,
    pub payload: Payload,
    pub bytes: u64,
}

/// Append-only record of every simulated transfer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    sync_events: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a payload of `scalars` 64-bit values.
    pub fn record(&mut self, round: u64, client: Option<usize>, direction: Direction, payload: Payload, scalars: usize) {
        self.entries.push(LedgerEntry {
            round,
            client,
            direction,
            payload,
            bytes: scalars as u64 * BYTES_PER_SCALAR,
        });
    }

    /// Marks one model synchronization (an FL/SFL averaging or an SSL hand-off pass).
    pub fn mark_sync(&mut self) {
        self.sync_events += 1;
    }

    pub fn sync_events(&self) -> u64 {
        self.sync_events
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn bytes_where(&self, pred: impl Fn(&LedgerEntry) -> bool) -> u64 {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.bytes).sum()
    }

    pub fn bytes_for_payload(&self, payload: Payload) -> u64 {
        self.bytes_where(|e| e.payload == payload)
    }

    pub fn bytes_for_client(&self, client: usize) -> u64 {
        self.bytes_where(|e| e.client == Some(client))
    }

    pub fn broadcast_bytes(&self) -> u64 {
        self.bytes_where(|e| e.client.is_none())
    }

    pub fn clients(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().filter_map(|e| e.client).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconcileItem {
    pub item: &'static str,
    pub analytic_bytes: f64,
    pub measured_bytes: f64,
    pub relative_error: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconcileReport {
    pub method: Method,
    pub tolerance: f64,
    pub items: Vec<ReconcileItem>,
    /// Per-client bytes predicted by [`comm_per_client`] (plus any extra
    /// model synchronizations recorded in the ledger).
    pub analytic_per_client: f64,
    pub measured_per_client: f64,
    pub relative_error: f64,
    /// Whether the per-client totals agree within tolerance.
    pub within_tolerance: bool,
}

impl ReconcileReport {
    pub fn all_items_within(&self) -> bool {
        self.items.iter().all(|i| i.within_tolerance)
    }
}

impl fmt::Display for ReconcileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (tolerance {:.2}%)", self.method, 100.0 * self.tolerance)?;
        for i in &self.items {
            writeln!(
                f,
                "  {:<22} analytic {:>14.1} B  measured {:>14.1} B  err {:>9.4}%  {}",
                i.item,
                i.analytic_bytes,
                i.measured_bytes,
                100.0 * i.relative_error,
                if i.within_tolerance { "ok" } else { "MISMATCH" }
            )?;
        }
        write!(
            f,
            "  per client             analytic {:>14.1} B  measured {:>14.1} B  err {:>9.4}%  {}",
            self.analytic_per_client,
            self.measured_per_client,
            100.0 * self.relative_error,
            if self.within_tolerance { "ok" } else { "MISMATCH" }
        )
    }
}

fn rel_err(analytic: f64, measured: f64) -> f64 {
    if analytic == measured {
        0.0
    } else if analytic == 0.0 {
        f64::INFINITY
    } else {
        (measured - analytic).abs() / analytic.abs()
    }
}

/// Compares a ledger with the closed-form prediction for `method`.
///
/// `params` must describe the run that filled the ledger: `dataset_size` is
/// the number of samples processed, `cut_output_mb` the smashed size per
/// sample (e.g. `cut_width · 8 / 1e6`), and the model sizes the serialized
/// parameter counts. The formulas assume one model synchronization per
/// epoch; the model-weight term is scaled by the number of synchronizations
/// the ledger recorded.
pub fn reconcile(ledger: &CommLedger, method: Method, params: &CostParams, tolerance: f64) -> Result<ReconcileReport> {
    params.validate()?;
    let mb = BYTES_PER_MB;
    let (d, sl, c, phi) = (params.dataset_size, params.cut_output_mb * mb, params.clients, params.active_fraction);
    let syncs = ledger.sync_events() as f64;

    let (smashed, unicast, broadcast, weights) = match method {
        Method::Fl => (0.0, 0.0, 0.0, 2.0 * c * params.model_mb * mb * syncs),
        Method::Ssl | Method::Sfl => (d * sl, d * sl, 0.0, 2.0 * c * params.client_model_mb * mb * syncs),
        Method::Psl => (d * sl, d * sl, 0.0, 0.0),
        Method::Sglr => (d * sl, (1.0 - phi) * d * sl, sl, 0.0),
    };
    let measured_smashed = ledger.bytes_for_payload(Payload::Smashed) as f64;
    let measured_unicast = ledger.bytes_where(|e| e.payload == Payload::CutGradient && e.client.is_some()) as f64;
    let measured_broadcast = ledger.bytes_where(|e| e.payload == Payload::CutGradient && e.client.is_none()) as f64;
    let measured_weights = ledger.bytes_for_payload(Payload::ModelWeights) as f64;

    let items = [
        ("smashed (up)", smashed, measured_smashed),
        ("cut-grad unicast", unicast, measured_unicast),
        ("cut-grad broadcast", broadcast, measured_broadcast),
        ("model-weights", weights, measured_weights),
    ]
    .into_iter()
    .map(|(item, analytic_bytes, measured_bytes)| {
        let relative_error = rel_err(analytic_bytes, measured_bytes);
        ReconcileItem {
            item,
            analytic_bytes,
            measured_bytes,
            relative_error,
            within_tolerance: relative_error <= tolerance,
        }
    })
    .collect::<Vec<_>>();

    // Same quantity as comm_per_client, generalized to `syncs` model exchanges.
    let analytic_per_client = (smashed + unicast + broadcast + weights) / c;
    let measured_per_client = ledger.total_bytes() as f64 / c;
    let relative_error = rel_err(analytic_per_client, measured_per_client);
    Ok(ReconcileReport {
        method,
        tolerance,
        items,
        analytic_per_client,
        measured_per_client,
        relative_error,
        within_tolerance: relative_error <= tolerance,
    })
}
