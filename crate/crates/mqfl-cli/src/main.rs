//! Command-line experiment runner over the mqfl library: `run` executes one
//! config, `sweep` varies one axis across values, `evaluate` scores a saved
//! checkpoint against a feature container. Exit codes: 0 success, 1 runtime
//! failure, 2 invalid configuration or arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mqfl::config::ExperimentConfig;
use mqfl::error::Error;
use mqfl::experiment::{evaluate_checkpoint, run_experiment, run_sweep, SweepAxis};

#[derive(Parser)]
#[command(
    name = "mqfl",
    version,
    about = "Desk-scale multimodal quantum federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config and write its artifacts.
    Run {
        /// Path to the experiment config (JSON).
        config: PathBuf,
    },
    /// Run one experiment per value along an axis, merging the results.
    Sweep {
        /// Path to the base experiment config (JSON).
        config: PathBuf,
        /// Axis to vary: qubits, layers, clients, data_fraction,
        /// missing_fraction, or mma_on_off.
        #[arg(long)]
        axis: String,
        /// Comma-separated cell values, e.g. `2,4,8`. Optional for
        /// mma_on_off, which defaults to both settings.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Score a checkpoint on a feature container, overall and per modality.
    Evaluate {
        /// Model checkpoint written by a run.
        checkpoint: PathBuf,
        /// Feature container to score against.
        dataset: PathBuf,
        /// Where to write the JSON report.
        #[arg(long, default_value = "evaluation.json")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match configure_workers().and_then(|()| dispatch(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Honors MQFL_WORKERS by sizing the global worker pool used for per-sample
/// gradient parallelism and client training.
fn configure_workers() -> mqfl::Result<()> {
    let Ok(raw) = std::env::var("MQFL_WORKERS") else {
        return Ok(());
    };
    let workers: usize = raw.parse().map_err(|_| {
        Error::config(
            "MQFL_WORKERS",
            format!("expected a positive integer, got {raw:?}"),
        )
    })?;
    if workers == 0 {
        return Err(Error::config("MQFL_WORKERS", "must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::structural(format!("worker pool setup failed: {e}")))
}

fn dispatch(cli: Cli) -> mqfl::Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let config = ExperimentConfig::from_path(&config)?;
            let outcome = run_experiment(&config)?;
            let summary = &outcome.summary;
            println!("config hash {}", summary.config_hash);
            println!(
                "{} rounds | {} train / {} test samples | seed {}",
                summary.rounds,
                summary.num_train_samples,
                summary.num_test_samples,
                summary.master_seed
            );
            println!("final test accuracy {:.4}", summary.final_test_accuracy);
            for (spec, acc) in config
                .modalities
                .iter()
                .zip(&summary.final_modality_accuracy)
            {
                println!("  {} alone: {:.4}", spec.name, acc);
            }
            println!("artifacts in {}", config.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let base = ExperimentConfig::from_path(&config)?;
            let axis = SweepAxis::parse(&axis)?;
            let report = run_sweep(&base, axis, &values)?;
            for cell in &report.cells {
                match cell.test_accuracy {
                    Some(acc) => println!(
                        "cell {} {}={}: accuracy {:.4}",
                        cell.index, cell.axis, cell.value, acc
                    ),
                    None => println!(
                        "cell {} {}={}: FAILED ({})",
                        cell.index,
                        cell.axis,
                        cell.value,
                        cell.error.as_deref().unwrap_or("unknown error")
                    ),
                }
            }
            println!("combined table {}", report.csv_path.display());
            let failed = report.cells.iter().filter(|c| !c.ok).count();
            if failed > 0 {
                eprintln!("error: {failed} of {} sweep cells failed", report.cells.len());
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
        } => {
            let report = evaluate_checkpoint(&checkpoint, &dataset)?;
            println!("{} samples", report.num_samples);
            println!("overall accuracy {:.4}", report.overall_accuracy);
            for modality in &report.modality_accuracy {
                match modality.accuracy {
                    Some(acc) => println!("  {} alone: {:.4}", modality.name, acc),
                    None => println!("  {} alone: no samples carry it", modality.name),
                }
            }
            let file = std::fs::File::create(&out)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)
                .map_err(Error::from)?;
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
