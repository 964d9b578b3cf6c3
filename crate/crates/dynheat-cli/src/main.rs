//! `dynheat`: forward simulation, follower equilibria, penalized
//! null-control synthesis and weighted observability experiments, driven by
//! a TOML configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynheat::report::sha256_hex;
use dynheat::Error;

#[derive(Parser)]
#[command(name = "dynheat", version, about = "Numerical laboratory for heat equations with dynamic boundary conditions")]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true, default_value = "dynheat.toml")]
    config: PathBuf,

    /// Output directory; overrides [output].directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Random seed; overrides [carleman].seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the uncontrolled forward problem from the configured initial state.
    Simulate,
    /// Solve the follower equilibrium under zero leader control.
    Nash,
    /// Synthesize the penalized null control and the induced equilibrium.
    Hum,
    /// Sample weighted observability quotients over random terminal data.
    Observability,
    /// Tabulate the landscape function and the weight family.
    Weights,
    /// Cross-check the iterative solvers against dense factorizations on a
    /// small built-in problem.
    Oracle,
    /// Null-control synthesis for the nonlinear dynamics by iterating the
    /// linear synthesis on frozen coefficients.
    Semilinear,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::EllipticityViolation { .. }
        | Error::CriticalPointOutsideOmegaPrime { .. }
        | Error::MultipleCriticalPoints { .. } => 2,
        Error::NoConvergence { .. }
        | Error::OuterNoConvergence { .. }
        | Error::PerStepNoConvergence { .. }
        | Error::NonFiniteIterate(_)
        | Error::SingularMatrix { .. }
        | Error::SingularStepMatrix { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> dynheat::Result<()> {
    if let Some(threads) = cli.threads {
        // A second initialization in the same process is harmless; the pool
        // keeps its first configuration.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let text = std::fs::read_to_string(&cli.config).map_err(|e| {
        Error::Config(format!("cannot read configuration {}: {e}", cli.config.display()))
    })?;
    let hash = sha256_hex(text.as_bytes());
    let cfg = config::RunConfig::parse(&text)?;
    let out = commands::out_dir(&cfg, &cli.out);
    let seed = cli.seed.unwrap_or(cfg.carleman.seed);
    let built = config::build(&cfg)?;
    let ctx = commands::Ctx { cfg, hash, out, seed };
    match cli.cmd {
        Command::Simulate => commands::simulate(&ctx, &built),
        Command::Nash => commands::nash(&ctx, &built),
        Command::Hum => commands::hum(&ctx, &built),
        Command::Observability => commands::observability(&ctx, &built),
        Command::Weights => commands::weights(&ctx, &built),
        Command::Oracle => commands::oracle(&ctx),
        Command::Semilinear => commands::semilinear(&ctx, built),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
