use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use empc_cli::{cmd_gradcheck, cmd_run, cmd_sweep, cmd_verify, RunOptions};

#[derive(Parser)]
#[command(name = "empc", version, about = "Economic MPC with parameter-varying storage functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Sweep workers (0 = one per logical core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Seed for sampling in the verifiers and probes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Record the solver trace of every step.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the closed loop and check every invariant.
    Run { config: PathBuf },
    /// Run a parameter sweep.
    Sweep { spec: PathBuf },
    /// Check the terminal and storage assumptions by sampling.
    Verify { config: PathBuf },
    /// Finite-difference check of all OCP gradients.
    Gradcheck { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = RunOptions { seed: cli.seed, trace: cli.trace, ..RunOptions::default() };
    let code = match &cli.command {
        Command::Run { config } => cmd_run(config, &cli.out, &opts),
        Command::Sweep { spec } => cmd_sweep(spec, &cli.out, cli.jobs, &opts),
        Command::Verify { config } => cmd_verify(config, cli.seed),
        Command::Gradcheck { config } => cmd_gradcheck(config, cli.seed),
    };
    ExitCode::from(code as u8)
}
