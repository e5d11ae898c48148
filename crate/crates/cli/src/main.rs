mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::io::CliError;

/// Simulate and analyze AoI-based scheduling of smart sensors over lossy
/// channels.
#[derive(Debug, Parser)]
#[command(name = "aoi-sched", version, about)]
struct Cli {
    /// Master random seed; overrides any seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for simulations.
    #[arg(long, global = true, env = "AOI_SCHED_THREADS")]
    threads: Option<usize>,

    /// Output file. Tables are written as CSV with a JSON mirror next to them.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print machine-readable JSON only.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a random plant ensemble.
    Gen(GenArgs),
    /// Run a Monte Carlo simulation.
    Simulate(SimArgs),
    /// Compute performance bounds and stability verdicts.
    Bounds(BoundsArgs),
    /// Compare the lightweight policy with the DP optimum on small ensembles.
    Dp(DpArgs),
    /// Run a parameter sweep.
    Sweep(SimArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DynamicsArg {
    Gaussian,
    Normal,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// State dimension.
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Measurement dimension.
    #[arg(long, default_value_t = 3)]
    m: usize,
    /// Number of plants.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Spectral radius range, as `lo,hi`.
    #[arg(long, default_value = "1.05,1.3")]
    rho_range: String,
    /// Channel success probability range, as `lo,hi`.
    #[arg(long, default_value = "0.6,1.0")]
    p_range: String,
    #[arg(long, value_enum, default_value_t = DynamicsArg::Gaussian)]
    dynamics: DynamicsArg,
}

#[derive(Debug, Args)]
struct PlantSource {
    /// Plant ensemble JSON file.
    #[arg(long)]
    plants: Option<PathBuf>,
    /// Experiment config JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[command(flatten)]
    source: PlantSource,
    /// Policy to simulate; repeat for several.
    #[arg(long = "policy")]
    policies: Vec<String>,
    /// Channel count M.
    #[arg(long)]
    channels: Option<usize>,
    /// aoi, trace or empirical.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Discarded leading steps; defaults to 10% of the horizon.
    #[arg(long)]
    warmup: Option<usize>,
    /// Sweep as kind:lo:hi:count with kind scale, heterogeneity or channel.
    #[arg(long)]
    sweep: Option<String>,
}

#[derive(Debug, Args)]
struct BoundsArgs {
    #[command(flatten)]
    source: PlantSource,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Debug, Args)]
struct DpArgs {
    /// Plant ensemble; the first N plants form the single instance of each
    /// grid point. Without it random ensembles are generated.
    #[arg(long)]
    plants: Option<PathBuf>,
    /// Grid of M:N pairs.
    #[arg(long, default_value = "1:2,1:3,2:3,2:4,3:4")]
    grid: String,
    /// Random instances per grid point.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// AoI truncation of the product chain.
    #[arg(long, default_value_t = 25)]
    cap: u32,
    /// State dimension of generated plants.
    #[arg(long, default_value_t = 3)]
    n_dim: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Gen(args) => commands::gen(&cli, args),
        Command::Simulate(args) => commands::simulate(&cli, args, false),
        Command::Sweep(args) => commands::simulate(&cli, args, true),
        Command::Bounds(args) => commands::bounds(&cli, args),
        Command::Dp(args) => commands::dp(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
