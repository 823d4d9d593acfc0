//! Plug-in mutual-information estimates between raw inputs and smashed data.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{self, Layer};
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_UNITS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MIEstimate {
    /// Nats.
    pub value: f64,
    pub bins: usize,
    pub samples: usize,
    /// Set when either variable was constant; `value` is then 0.
    pub degenerate: bool,
}

/// Equal-width bin index of every value; `None` when all values coincide.
fn discretize(values: &[f64], bins: usize) -> Option<Vec<usize>> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    Some(
        values
            .iter()
            .map(|&v| (((v - lo) / width) as usize).min(bins - 1))
            .collect(),
    )
}

/// `I(X;Y)` in nats from equal-width histograms with `bins` bins per axis.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<MIEstimate> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("{} x samples but {} y samples", x.len(), y.len())));
    }
    if bins < 2 {
        return Err(Error::input("at least two bins are required"));
    }
    if x.len() < bins {
        return Err(Error::input(format!("{} samples for {bins} bins", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("mutual-information input".into()));
    }
    let (Some(bx), Some(by)) = (discretize(x, bins), discretize(y, bins)) else {
        return Ok(MIEstimate {
            value: 0.0,
            bins,
            samples: x.len(),
            degenerate: true,
        });
    };
    let mut table = vec![vec![0u64; bins]; bins];
    for (&i, &j) in bx.iter().zip(&by) {
        table[i][j] += 1;
    }
    let value = mutual_information_from_counts(&table)?;
    Ok(MIEstimate {
        value,
        bins,
        samples: x.len(),
        degenerate: false,
    })
}

/// Plug-in MI of a joint count table. The terms are summed in sorted order,
/// so a transposed table gives a bitwise identical result.
pub fn mutual_information_from_counts(table: &[Vec<u64>]) -> Result<f64> {
    let cols = table.first().map_or(0, Vec::len);
    if cols == 0 || table.iter().any(|r| r.len() != cols) {
        return Err(Error::dim("count table must be a nonempty rectangle"));
    }
    let rows_sum: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols_sum: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let n: f64 = rows_sum.iter().sum();
    if n == 0.0 {
        return Err(Error::input("count table is empty"));
    }
    let mut terms = Vec::new();
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                terms.push(c / n * ((c * n) / (rows_sum[i] * cols_sum[j])).ln());
            }
        }
    }
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>().max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageReport {
    /// Mean over the sampled smashed units of the best input-feature MI.
    pub score: f64,
    /// Sampled unit indices and their MI.
    pub units: Vec<(usize, f64)>,
    pub bins: usize,
    pub samples: usize,
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row(r)[c]).collect()
}

/// How much a client segment's output reveals about its input. Up to `units`
/// output units are drawn at random; each is scored by its largest MI with
/// any single input feature, and the scores are averaged.
pub fn smashed_leakage_score<R: Rng + ?Sized>(
    client_layers: &[Layer],
    inputs: &Tensor,
    units: usize,
    bins: usize,
    rng: &mut R,
) -> Result<LeakageReport> {
    if units == 0 {
        return Err(Error::input("at least one smashed unit must be sampled"));
    }
    let smashed = nn::predict(client_layers, inputs)?;
    let width = smashed.cols();
    let mut picked = index::sample(rng, width, units.min(width)).into_vec();
    picked.sort_unstable();
    let features: Vec<Vec<f64>> = (0..inputs.cols()).map(|c| column(inputs, c)).collect();
    let mut scored = Vec::with_capacity(picked.len());
    for u in picked {
        let s = column(&smashed, u);
        let mut best = 0.0f64;
        for f in &features {
            best = best.max(mutual_information(f, &s, bins)?.value);
        }
        scored.push((u, best));
    }
    let score = scored.iter().map(|&(_, v)| v).sum::<f64>() / scored.len() as f64;
    Ok(LeakageReport {
        score,
        units: scored,
        bins,
        samples: inputs.rows(),
    })
}
