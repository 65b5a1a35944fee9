//! `fedlab`: verify the oracle gates, run experiments, sweep an axis.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use fedlab_cli::config::ExperimentConfig;
use fedlab_cli::experiment::{run_experiment, run_sweep};
use fedlab_cli::gates::{enforce_gates, run_gates};

#[derive(Parser)]
#[command(name = "fedlab", about = "Federated-learning simulation lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle gate suite and print one line per check.
    Verify {
        /// Directory receiving oracle_reports.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment from a config file.
    Run {
        config: PathBuf,
        /// Skip the oracle gates.
        #[arg(long)]
        override_gates: bool,
        /// Override the configured precision (wide | standard).
        #[arg(long)]
        precision: Option<String>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a swept config field.
    Sweep {
        config: PathBuf,
        /// Dotted config field to sweep (e.g. partition.p, train.local_steps).
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        override_gates: bool,
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: &PathBuf,
    precision: Option<String>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(p) = precision {
        cfg.precision = p;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Verify { out } => {
            let report_path = out.map(|d| d.join("oracle_reports.txt"));
            let reports = run_gates(report_path.as_deref())?;
            let mut ok = true;
            for r in &reports {
                println!("{}", r.line());
                ok &= r.pass;
            }
            if !ok {
                anyhow::bail!("oracle gates failed");
            }
            Ok(())
        }
        Command::Run { config, override_gates, precision, out } => {
            let cfg = load_config(&config, precision, out)?;
            if override_gates {
                eprintln!("warning: oracle gates overridden");
            } else {
                let reports = enforce_gates(Some(&cfg.out_dir.join("oracle_reports.txt")))
                    .context("oracle gates")?;
                for r in &reports {
                    println!("{}", r.line());
                }
            }
            let artifacts = run_experiment(&cfg)?;
            for f in &artifacts.folds {
                println!(
                    "fold={} final_accuracy={} best_accuracy={} final_eval_loss={}",
                    f.fold, f.final_accuracy, f.best_accuracy, f.final_eval_loss
                );
            }
            println!("artifacts written to {}", artifacts.out_dir.display());
            Ok(())
        }
        Command::Sweep { config, axis, values, override_gates, precision, out } => {
            if values.is_empty() {
                anyhow::bail!("--values needs at least one entry");
            }
            let mut cfg = load_config(&config, precision, out.clone())?;
            let sweep_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            cfg.out_dir = sweep_dir.clone();
            if override_gates {
                eprintln!("warning: oracle gates overridden");
            } else {
                enforce_gates(Some(&sweep_dir.join("oracle_reports.txt")))
                    .context("oracle gates")?;
            }
            let path = run_sweep(&cfg, &axis, &values, &sweep_dir)?;
            println!("sweep written to {}", path.display());
            Ok(())
        }
    }
}
