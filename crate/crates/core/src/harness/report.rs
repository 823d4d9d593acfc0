use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::run::{MetricsRecord, RunOutput, RunSummary, SweepCell, SweepOutput};
use crate::comm::{comm_per_client, total_comm, training_time, CostParams, Method};
use crate::error::Result;

/// One JSON object per line.
pub fn write_metrics_jsonl<W: Write>(mut out: W, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn csv_string<T: Serialize>(header: &[&str], rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn summaries_csv(summaries: &[RunSummary]) -> Result<String> {
    csv_string(
        &[
            "run_id",
            "seed",
            "protocol",
            "clients",
            "active_fraction",
            "alpha",
            "epochs",
            "final_accuracy",
            "final_loss",
            "comm_bytes",
            "leakage",
        ],
        summaries,
    )
}

/// `metrics.jsonl` with every epoch of every run, then `summary.csv`.
pub fn write_run_outputs(dir: &Path, runs: &[RunOutput]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut metrics = std::io::BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
    for run in runs {
        write_metrics_jsonl(&mut metrics, &run.records)?;
    }
    metrics.flush()?;
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    fs::write(dir.join("summary.csv"), summaries_csv(&summaries)?)?;
    Ok(())
}

/// Rows are `(protocol, C)`, columns are `(φ, α)` pairs, cells read
/// `mean±std` accuracy in percent.
pub fn sweep_table_csv(cells: &[SweepCell]) -> Result<String> {
    let mut columns: Vec<(f64, f64)> = Vec::new();
    let mut rows: Vec<(String, usize)> = Vec::new();
    for c in cells {
        let col = (c.active_fraction, c.alpha);
        if !columns.contains(&col) {
            columns.push(col);
        }
        let row = (c.protocol.to_string(), c.clients);
        if !rows.contains(&row) {
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["protocol".to_string(), "clients".to_string()];
    header.extend(columns.iter().map(|(phi, alpha)| format!("phi={phi} alpha={alpha}")));
    w.write_record(&header)?;
    for (protocol, clients) in &rows {
        let mut record = vec![protocol.clone(), clients.to_string()];
        for &(phi, alpha) in &columns {
            let cell = cells.iter().find(|c| {
                c.protocol.to_string() == *protocol && c.clients == *clients && c.active_fraction == phi && c.alpha == alpha
            });
            record.push(cell.map_or(String::new(), |c| {
                format!("{:.2}±{:.2}", 100.0 * c.mean_accuracy, 100.0 * c.std_accuracy)
            }));
        }
        w.write_record(&record)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Run outputs plus `sweep.csv` (one row per cell) and `sweep_table.csv`.
pub fn write_sweep_outputs(dir: &Path, sweep: &SweepOutput) -> Result<()> {
    write_run_outputs(dir, &sweep.runs)?;
    let cells = csv_string(
        &[
            "protocol",
            "clients",
            "active_fraction",
            "alpha",
            "runs",
            "mean_accuracy",
            "std_accuracy",
            "mean_loss",
        ],
        &sweep.cells,
    )?;
    fs::write(dir.join("sweep.csv"), cells)?;
    fs::write(dir.join("sweep_table.csv"), sweep_table_csv(&sweep.cells)?)?;
    Ok(())
}

#[derive(Serialize)]
struct CostRow<'a> {
    label: &'a str,
    method: &'static str,
    clients: f64,
    active_fraction: f64,
    dataset_size: f64,
    cut_output_mb: f64,
    model_mb: f64,
    client_model_mb: f64,
    per_client_mb: f64,
    total_mb: f64,
    time_s: f64,
}

/// The reference setting, then dataset sizes from 50 000 to 2 000 000 at
/// 10, 100 and 1000 clients.
pub fn default_cost_grid(base: &CostParams) -> Vec<(String, CostParams)> {
    let mut grid = vec![("reference".to_string(), CostParams::reference())];
    for dataset_size in [50_000.0, 500_000.0, 2_000_000.0] {
        for clients in [10.0, 100.0, 1000.0] {
            grid.push((
                format!("d{dataset_size}-c{clients}"),
                CostParams {
                    dataset_size,
                    clients,
                    ..*base
                },
            ));
        }
    }
    grid
}

/// One row per (grid point, method).
pub fn emit_cost_report(methods: &[Method], grid: &[(String, CostParams)]) -> Result<String> {
    let mut rows = Vec::new();
    for (label, p) in grid {
        for &m in methods {
            rows.push(CostRow {
                label,
                method: m.name(),
                clients: p.clients,
                active_fraction: p.active_fraction,
                dataset_size: p.dataset_size,
                cut_output_mb: p.cut_output_mb,
                model_mb: p.model_mb,
                client_model_mb: p.client_model_mb,
                per_client_mb: comm_per_client(m, p)?,
                total_mb: total_comm(m, p)?,
                time_s: training_time(m, p)?,
            });
        }
    }
    csv_string(
        &[
            "label",
            "method",
            "clients",
            "active_fraction",
            "dataset_size",
            "cut_output_mb",
            "model_mb",
            "client_model_mb",
            "per_client_mb",
            "total_mb",
            "time_s",
        ],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_method_list_is_header_only() {
        let csv = emit_cost_report(&[], &default_cost_grid(&CostParams::reference())).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("label,method,"));
    }

    #[test]
    fn reference_row_present() {
        let grid = default_cost_grid(&CostParams::reference());
        let csv = emit_cost_report(&Method::ALL, &grid).unwrap();
        let row = csv
            .lines()
            .find(|l| l.starts_with("reference,SGLR,"))
            .expect("reference row");
        let total: f64 = row.split(',').nth(9).unwrap().parse().unwrap();
        assert!((total - 1800.024).abs() < 1e-9);
        assert!(csv.lines().any(|l| l.contains(",50000.0,")));
        assert_eq!(csv.lines().count(), 1 + grid.len() * Method::ALL.len());
    }
}
