use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Solve and verify backward stochastic differential equations driven by a
/// finite-state Markov chain, as described by a JSON run configuration.
#[derive(Parser)]
#[command(name = "mcbsde", version, about)]
struct Args {
    /// Path to the run configuration (one file = one command invocation).
    config: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    ExitCode::from(mcbsde_cli::run_from_path(&args.config))
}
