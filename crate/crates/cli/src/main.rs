//! `fedproj` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime or property failure, 2 configuration
//! error (including bad command-line arguments).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "fedproj", version, about = "Posterior aggregation and personalization for federated learning")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Directory for all outputs (default: `out_dir` from the config, else `out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; more than one trains clients concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Federated training, evaluation in all four settings.
    Run {
        config: PathBuf,
        /// Also run the deterministic mean-averaging baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Personalization sweep over the configured λ grid.
    SweepLambda { config: PathBuf },
    /// Pairwise Wilcoxon tests between aggregation methods across seeds.
    CompareAgg { config: PathBuf },
    /// Two-task incremental learning by barycenter interpolation.
    Incremental { config: PathBuf },
    /// Randomized checks of the closed-form geometry.
    ValidateGeometry {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Swap in a known-wrong closed form to confirm the suite fails.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Write client shard manifests without training.
    Partition { config: PathBuf },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FaultArg {
    W2bUsesEaaVariance,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = pool.install(|| commands::dispatch(&cli.global, cli.command));
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if matches!(e, fedproj::Error::Config { .. }) { 2 } else { 1 })
        }
    }
}
