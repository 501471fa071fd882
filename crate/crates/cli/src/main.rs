//! `lcpm`: limit cycles, random return maps and exit-time statistics from
//! the command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure.

mod builtin;
mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Invalid or inconsistent configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Parser)]
#[command(name = "lcpm", version, about = "Random Poincaré maps of stochastically perturbed limit cycles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub replicates: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Omit the timestamp comment line at the top of CSV files.
    #[arg(long, global = true)]
    pub no_header_timestamp: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Locate a limit cycle and compute its return-map coefficients.
    FindCycle {
        /// Builtin model; overrides the config.
        #[arg(long)]
        model: Option<String>,
    },
    /// Sample exit times of a random return map.
    ExitTimes,
    /// Long stochastic run of a neuron model with epoch statistics.
    Neuro {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Hazard and geometric-tail analysis of an exit-sample CSV.
    Fit {
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<lcpm_core::Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
