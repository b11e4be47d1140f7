//! `treefeat` command-line front end.
//!
//! Exit codes: 0 on success, 1 on invalid input or flags, 2 when a run fails.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EbmTrainArgs, EmbedArgs, EnumerateArgs, LoglikArgs, ReconstructArgs, SbnCheckArgs, VbpiEvalArgs, VbpiTrainArgs};

#[derive(Debug, Parser)]
#[command(name = "treefeat", version, about = "Topological features, SBNs, EBMs and VBPI for phylogenetic trees")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true, env = "TREEFEAT_THREADS")]
    threads: Option<usize>,
    /// Flat JSON file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Interior node embeddings of a tree, as CSV.
    Embed(EmbedArgs),
    /// Rebuilds a topology from an embedding CSV.
    Reconstruct(ReconstructArgs),
    /// Lists (or counts) all unrooted topologies on N taxa.
    Enumerate(EnumerateArgs),
    /// Jukes–Cantor log-likelihood of a tree with branch lengths.
    Loglik(LoglikArgs),
    /// Builds an SBN support from trees and checks normalization and sampling.
    SbnCheck(SbnCheckArgs),
    /// Trains an energy-based tree model by NCE against a Dirichlet target.
    EbmTrain(EbmTrainArgs),
    /// Trains a variational posterior over trees and branch lengths.
    VbpiTrain(VbpiTrainArgs),
    /// Evaluates a VBPI checkpoint: marginal likelihood and amortization gaps.
    VbpiEval(VbpiEvalArgs),
}

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Failed(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Failed(m) => write!(f, "run failed: {m}"),
        }
    }
}

/// Tags an error as bad input (exit 1) or as a failed run (exit 2).
pub trait Classify<T> {
    fn invalid(self) -> Result<T, CliError>;
    fn failed(self) -> Result<T, CliError>;
}

impl<T, E: std::fmt::Display> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Invalid(e.to_string()))
    }

    fn failed(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Failed(e.to_string()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Invalid("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().failed()?;
    }
    let file = run::load_config_file(cli.global.config.as_deref())?;
    match cli.command {
        Command::Embed(a) => commands::embed(a, file),
        Command::Reconstruct(a) => commands::reconstruct(a, file),
        Command::Enumerate(a) => commands::enumerate(a, file),
        Command::Loglik(a) => commands::loglik(a, file),
        Command::SbnCheck(a) => commands::sbn_check(a, file),
        Command::EbmTrain(a) => commands::ebm_train(a, file),
        Command::VbpiTrain(a) => commands::vbpi_train(a, file),
        Command::VbpiEval(a) => commands::vbpi_eval(a, file),
    }
}
