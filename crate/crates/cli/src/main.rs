mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use nap::data::DataError;
use nap::metrics::MetricsError;
use nap::train::TrainError;

use commands::{AblateArgs, EvalArgs, GenerateArgs, PddArgs, ReportArgs, TrainArgs};

/// Domain-aware graph contrastive learning on multi-domain graphs.
#[derive(Debug, Parser)]
#[command(name = "nap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a synthetic multi-domain graph file.
    Generate(GenerateArgs),
    /// Train an encoder and write metrics and checkpoints.
    Train(TrainArgs),
    /// Probe accuracy of a checkpoint on the validation and target domains.
    Eval(EvalArgs),
    /// Pairwise domain discrepancy of an embedding export.
    Pdd(PddArgs),
    /// Train with cross-domain negatives removed at several ratios.
    AblateCdp(AblateArgs),
    /// Cosine similarity of promoted and remaining cross-domain pairs.
    ReportCdpSim(ReportArgs),
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or config files.
    Usage(String),
    /// Anything that fails after the inputs were accepted.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::ConfigInvalid(_)
            | DataError::TooFewDomains { .. }
            | DataError::EmptyRole(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn run() -> Result<(), CliError> {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok {
                Ok(())
            } else {
                Err(CliError::Usage(String::new()))
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");

    match cli.command {
        Cmd::Generate(a) => commands::generate(a.resolve(sub)?),
        Cmd::Train(a) => commands::train(a.resolve(sub)?),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Pdd(a) => commands::pdd(a),
        Cmd::AblateCdp(a) => commands::ablate(a.resolve(sub)?),
        Cmd::ReportCdpSim(a) => commands::report_cdp_sim(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(e.code())
        }
    }
}
