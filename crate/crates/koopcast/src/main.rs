use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use koopcast::harness::{
    cmd_evaluate, cmd_generate, cmd_modes, cmd_sweep_range, cmd_train, ExperimentConfig,
};

/// Koopman-operator forecasting with hard constraints on decay rates and
/// frequencies: dataset generation, training, evaluation, and mode export.
#[derive(Parser)]
#[command(name = "koopcast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset CSVs from the config's generator.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir, else ".").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seeds (defaults to the config's n_seeds).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Train one model per seed; write checkpoints, histories, and a report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Evaluate a checkpoint against the config dataset (or an explicit CSV).
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate against this CSV instead of the config dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seed used to resolve a generator-backed dataset.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export dynamic modes of a checkpoint as CSV.
    Modes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train across frequency-range widths centered on the true frequency.
    SweepRange {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated widths; "inf" frees the frequency entirely.
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.1,inf")]
        widths: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
}

fn out_dir(cli_out: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    cli_out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn parse_width(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        other => other
            .parse::<f64>()
            .map_err(|e| format!("bad width '{s}': {e}")),
    }
}

fn run() -> Result<ExitCode, Box<dyn std::error::Error>> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            config,
            out,
            seeds,
            seed_offset,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, &config);
            let files = cmd_generate(&config, &dir, seeds, seed_offset)?;
            println!(
                "wrote {} dataset file(s) under {}",
                files.len(),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            out,
            seeds,
            seed_offset,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, &config);
            let report = cmd_train(&config, &dir, seeds, seed_offset)?;
            if report.all_ok() {
                Ok(ExitCode::SUCCESS)
            } else {
                for outcome in report.outcomes.iter().filter(|o| !o.is_ok()) {
                    eprintln!(
                        "seed {} failed: {}",
                        outcome.seed,
                        outcome.error.as_deref().unwrap_or("unknown")
                    );
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            data,
            seed,
            out,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, &config);
            cmd_evaluate(&config, &checkpoint, data.as_deref(), seed, &dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Modes { checkpoint, out } => {
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            cmd_modes(&checkpoint, &dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepRange {
            config,
            widths,
            out,
            seeds,
            seed_offset,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, &config);
            let widths: Vec<f64> = widths
                .iter()
                .map(|w| parse_width(w))
                .collect::<Result<_, _>>()?;
            cmd_sweep_range(&config, &widths, &dir, seeds, seed_offset)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
