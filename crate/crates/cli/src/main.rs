use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ursm::gem::FitMode;

mod commands;

/// Joint inference over single-cell and bulk RNA-seq counts.
#[derive(Parser, Debug)]
#[command(name = "ursm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate bulk and single-cell counts with known ground truth.
    Simulate(SimulateArgs),
    /// Fit the model and write the profile, dropout posterior and proportions.
    Fit(FitArgs),
    /// Impute called dropouts using a previous fit.
    Impute(ImputeArgs),
    /// Estimate bulk proportions with the parameters of a previous fit.
    Deconvolve(DeconvolveArgs),
    /// Compare the naive estimator, NMF and both fits on simulated data.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Joint,
    ScOnly,
    MapFast,
}

impl From<ModeArg> for FitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Joint => FitMode::Joint,
            ModeArg::ScOnly => FitMode::SingleCellOnly,
            ModeArg::MapFast => FitMode::MapFast,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct FitOverrides {
    /// Gibbs sweeps per E-step.
    #[arg(long)]
    sweeps: Option<usize>,
    /// Maximum number of EM iterations.
    #[arg(long = "em-iters")]
    em_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Bulk counts (genes × samples); without it the single-cell submodel is fitted.
    #[arg(long)]
    bulk: Option<PathBuf>,
    /// Single-cell counts (genes × cells).
    #[arg(long)]
    sc: Option<PathBuf>,
    /// Cell type of each cell, numbered from 1.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    overrides: FitOverrides,
}

#[derive(Args, Debug)]
pub struct ImputeArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    sc: PathBuf,
    /// Zeros with posterior observation probability below this are called dropouts.
    #[arg(long)]
    threshold: Option<f64>,
    /// Defaults to the fit directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Round imputed values to integers.
    #[arg(long)]
    round: bool,
}

#[derive(Args, Debug)]
pub struct DeconvolveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    bulk: PathBuf,
    #[arg(long)]
    sweeps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds; overrides the configuration.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    overrides: FitOverrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Impute(a) => commands::impute(a),
        Command::Deconvolve(a) => commands::deconvolve(a),
        Command::Benchmark(a) => commands::benchmark(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
