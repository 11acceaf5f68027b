//! `ctsftm simulate | estimate | diagnose --config FILE`.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 statistical
//! non-convergence. Logs go to standard error; results only to files.

mod commands;
mod config;
mod diagnose;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctsftm::data_model::DataError;
use ctsftm::estimator::EstimatorError;
use ctsftm::hazard_models::HazardError;
use ctsftm::simulation::SimulationError;
use thiserror::Error;

#[derive(Parser, Debug)]
#[command(name = "ctsftm", version, about = "Structural failure time models for intermittent treatments")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic cohort: three CSV tables and truth.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit the nuisance models and solve for psi.
    Estimate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Martingale, covariation, weight and positivity checks.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Statistical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Statistical(_) => 3,
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<HazardError> for CliError {
    fn from(e: HazardError) -> Self {
        match e {
            HazardError::RefillNotConverged { .. } | HazardError::CoxNotConverged { .. } => {
                CliError::Statistical(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Hazard(h) => h.into(),
            EstimatorError::Singular { .. }
            | EstimatorError::NotConverged { .. }
            | EstimatorError::BootstrapFailures { .. } => CliError::Statistical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate { config } => commands::simulate(config),
        Command::Estimate { config } => commands::estimate(config),
        Command::Diagnose { config } => diagnose::run(config),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
