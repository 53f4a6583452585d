//! `nash-bsde`: batch front end for the solver and its verifiers.
//!
//! Exit codes: 0 pass, 1 verification failure, 2 invalid configuration,
//! 3 numerical or I/O failure.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Outcome};
use config::{RunConfig, SEED_ENV};
use output::Artifacts;

#[derive(Parser)]
#[command(version, about = "Nash equilibria of two-player stochastic differential games via coupled BSDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    config: PathBuf,
    /// Overrides `output_dir` from the configuration.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate reference paths and export them as CSV.
    Simulate(Common),
    /// Solve the coupled BSDE system and export the solution.
    Solve(Common),
    /// Solve, then test the standard deviation family for improvements.
    VerifyNash(Common),
    /// Check the best-response selectors against a control grid.
    CheckIsaacs(Common),
    /// Check the mollified generators at each configured level.
    VerifyGenerator(Common),
    /// Gaussian mass, Aronson bounds, domination integral and lognormal mass.
    DensityCheck(Common),
}

type Handler = fn(&RunConfig, &mut Artifacts) -> Result<Outcome, CliError>;

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let (common, f): (&Common, Handler) = match &cli.command {
        Command::Simulate(c) => (c, commands::simulate),
        Command::Solve(c) => (c, commands::solve_cmd),
        Command::VerifyNash(c) => (c, commands::verify_nash),
        Command::CheckIsaacs(c) => (c, commands::check_isaacs_cmd),
        Command::VerifyGenerator(c) => (c, commands::verify_generator),
        Command::DensityCheck(c) => (c, commands::density_check),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok())?;
    let dir = common.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let mut out = Artifacts::new(&dir)?;
    f(&cfg, &mut out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(o) => {
            println!("{}", o.summary.line());
            ExitCode::from(if o.pass { 0 } else { 1 })
        }
        Err(CliError::Config(e)) => {
            println!("status=fail error=config field={}", if e.field.is_empty() { "-" } else { &e.field });
            eprintln!("invalid configuration: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(e)) => {
            println!("status=fail error=numerical");
            eprintln!("numerical failure: {e}");
            ExitCode::from(3)
        }
        Err(CliError::Io(e)) => {
            println!("status=fail error=io");
            eprintln!("i/o failure: {e}");
            ExitCode::from(3)
        }
    }
}
