//! `ovl`: bound checks, sample generation, prompt training, evaluation and
//! ablations over JSON files.
//!
//! Exit codes: 0 success, 1 a bound check exceeded its violation budget,
//! 2 bad flags or inputs. The seed comes from `--seed`, then the `OVL_SEED`
//! environment variable, then the config file.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] ovl_core::Error),

    #[error("violation rate {rate} exceeds delta {delta}")]
    Gate { rate: f64, delta: f64 },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Gate { .. } => 1,
            _ => 2,
        }
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Parser)]
#[command(name = "ovl", version, about = "Open-vocabulary prompt learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo checks of the distribution bounds.
    Bounds {
        #[command(subcommand)]
        which: BoundsCommand,
    },
    /// Write the reference benchmark as train/test/taxonomy/config files.
    Fixture(FixtureArgs),
    /// Predict unseen classes and synthesize generated samples.
    Generate(GenerateArgs),
    /// Train prompts with sparse distribution alignment.
    Train(TrainArgs),
    /// Base/new/H evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Run ablation variants over several seeds on a benchmark config.
    Ablate(AblateArgs),
}

#[derive(Debug, Subcommand)]
enum BoundsCommand {
    VerifyJoint(JointArgs),
    VerifyPosterior(PosteriorArgs),
}

#[derive(Debug, Args)]
struct JointArgs {
    #[arg(long)]
    alphabet: usize,
    #[arg(long)]
    m: u64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    trials: u64,
    /// Weight of the random perturbation mixed into the smoothed estimate.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PosteriorArgs {
    /// Number of unseen classes.
    #[arg(long)]
    n_yu: usize,
    /// Number of predicted (generated) unseen classes.
    #[arg(long)]
    n_ye: usize,
    #[arg(long)]
    m: u64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    trials: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FixtureArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Benchmark config; defaults to the bundled reference benchmark.
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k0: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',', default_values_t = ovl_core::evalbench::VARIANT_NAMES.map(String::from))]
    variants: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Bounds { which } => match which {
            BoundsCommand::VerifyJoint(a) => commands::verify_joint(&a),
            BoundsCommand::VerifyPosterior(a) => commands::verify_posterior(&a),
        },
        Command::Fixture(a) => commands::fixture(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
