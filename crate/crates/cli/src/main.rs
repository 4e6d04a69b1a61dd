mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Failure;

#[derive(Parser)]
#[command(name = "tlqr", version, about = "Transfer learning for high-dimensional quantile regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model from CSV studies and write it as JSON.
    Fit(FitArgs),
    /// Run a Monte Carlo experiment from a JSON spec.
    Experiment(ExperimentArgs),
    /// Write one simulated replication as CSV files plus its ground truth.
    Simulate(SimulateArgs),
    /// Per-category share of absolute coefficient mass for a fitted model.
    Contrib(ContribArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    TargetOnly,
    Oracle,
    Naive,
    Pseudo,
    Translasso,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    pub target: PathBuf,
    /// Source study CSV; repeat for several sources.
    #[arg(long = "source")]
    pub sources: Vec<PathBuf>,
    #[arg(long)]
    pub tau: f64,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Comma-separated 1-based source indices for the oracle method.
    #[arg(long, value_delimiter = ',')]
    pub informative: Option<Vec<usize>>,
    /// A positive number, `auto` or `auto-ceps`.
    #[arg(long)]
    pub epsilon0: Option<String>,
    /// Number of sources kept by the pseudo method.
    #[arg(long)]
    pub m: Option<usize>,
    /// Seeds the detection split and the cross-validation folds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with solver and tuning settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Z-score every study's features with the target's column statistics.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub replication: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ContribArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Failure::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Experiment(a) => commands::experiment(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Contrib(a) => commands::contrib(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
