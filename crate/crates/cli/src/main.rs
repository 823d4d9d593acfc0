use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splitsim::comm::Method;
use splitsim::harness::{self, ExperimentConfig};
use splitsim::Error;

#[derive(Parser)]
#[command(name = "splitsim", version, about = "Split-learning protocol simulator")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train every configured seed and write metrics.
    Run(Common),
    /// Train every cell of the configured grid over every seed.
    Sweep(Common),
    /// Print the analytic communication and time report as CSV.
    Cost(Common),
    /// Train, then score how much client 0's smashed data reveals.
    Leakage(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run exactly this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config field, e.g. `--set protocol.clients=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default `out/<name>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, extra: &[&str]) -> Result<ExperimentConfig, Error> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seeds=[{seed}]"));
            overrides.push(format!("protocol.seed={seed}"));
        }
        overrides.extend(extra.iter().map(|s| s.to_string()));
        harness::load_config(self.config.as_deref(), &overrides)
    }

    fn out_dir(&self, config: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out").join(&config.name))
    }
}

fn print_summaries(runs: &[harness::RunOutput]) {
    for r in runs {
        let s = &r.summary;
        let acc = s.final_accuracy.map_or("n/a".to_string(), |a| format!("{:.4}", a));
        let leak = s.leakage.map_or(String::new(), |l| format!(" leakage={l:.4}"));
        println!(
            "{} accuracy={acc} loss={:.4} comm_bytes={}{leak}",
            s.run_id, s.final_loss, s.comm_bytes
        );
    }
}

fn execute(verb: &Verb) -> Result<(), Error> {
    match verb {
        Verb::Run(c) | Verb::Leakage(c) => {
            let extra: &[&str] = if matches!(verb, Verb::Leakage(_)) { &["leakage.enabled=true"] } else { &[] };
            let config = c.load(extra)?;
            let runs = harness::run_experiment(&config)?;
            let dir = c.out_dir(&config);
            harness::write_run_outputs(&dir, &runs)?;
            print_summaries(&runs);
            eprintln!("wrote {}", dir.display());
        }
        Verb::Sweep(c) => {
            let config = c.load(&[])?;
            let sweep = harness::sweep(&config)?;
            let dir = c.out_dir(&config);
            harness::write_sweep_outputs(&dir, &sweep)?;
            print!("{}", harness::sweep_table_csv(&sweep.cells)?);
            eprintln!("wrote {}", dir.display());
        }
        Verb::Cost(c) => {
            let config = c.load(&[])?;
            let grid = harness::default_cost_grid(&config.cost);
            let csv = harness::emit_cost_report(&Method::ALL, &grid)?;
            if let Some(dir) = &c.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("cost.csv"), &csv)?;
            }
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
