//! `boundlim`: run, validate and report Monte Carlo experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use boundlim_core::harness::{report, resolve_threads, run_to_dir, ExperimentConfig, THREADS_ENV};
use boundlim_core::Error;
use clap::{Parser, Subcommand};

const EXIT_VALIDATION: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "boundlim", version, about = "Boundary-constrained estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV/JSON outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (overrides the config and the environment).
        #[arg(long, help = format!("Worker threads; falls back to {THREADS_ENV}, then the config"))]
        threads: Option<usize>,
        /// Output directory (defaults to the config's `output`, then out/<kind>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the summary of a finished run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. } | Error::InvalidSpec(_) | Error::Domain(_) | Error::Dimension { .. }
    )
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    ExperimentConfig::from_toml_str(&text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                println!(
                    "ok: {} experiment, {} reps, seed {}",
                    cfg.experiment.kind(),
                    cfg.reps,
                    cfg.seed
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("invalid config: {e}");
                ExitCode::from(EXIT_VALIDATION)
            }
        },
        Command::Run {
            config,
            seed,
            threads,
            out,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("invalid config: {e}");
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let threads = match resolve_threads(threads, cfg.threads) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("invalid thread count: {e}");
                    return ExitCode::from(EXIT_VALIDATION);
                }
            };
            let dir = out
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.kind()));
            match run_to_dir(&cfg, &dir, threads) {
                Ok(summary) if summary.failures.is_empty() => {
                    println!("wrote {}", dir.display());
                    ExitCode::SUCCESS
                }
                Ok(summary) => {
                    eprintln!(
                        "{} replication(s) failed; see {}",
                        summary.failures.len(),
                        dir.join("failures.csv").display()
                    );
                    ExitCode::from(EXIT_PARTIAL)
                }
                Err(e) if is_validation(&e) => {
                    eprintln!("invalid config: {e}");
                    ExitCode::from(EXIT_VALIDATION)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Report { input } => {
            let res = report(&input).with_context(|| format!("reading {}", input.display()));
            match res {
                Ok((json, text)) => {
                    println!("{}", serde_json::to_string_pretty(&json).unwrap_or_default());
                    println!();
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
