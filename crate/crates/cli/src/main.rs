//! `meterflow` command-line interface.
//!
//! Exit codes: 0 ok, 2 configuration, 3 input/output, 4 inference
//! degeneracy, 5 evaluation.

mod commands;
mod config;
mod error;
mod manifest;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meterflow::data_io::AmountUnit;

use crate::commands::{Context, InferArgs, Mode};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "meterflow", version, about = "Parking occupancy from meter payments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Re-hash the outputs listed in the output directory's manifest
    /// instead of running.
    #[arg(long)]
    verify: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum UnitArg {
    Dollars,
    Minutes,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario: observations, truth and a payment log.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate occupancy (and parameters with pmmh) from payments.
    Infer {
        /// Observation CSV or raw `block_id,date,amount` payment log.
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "pmmh")]
        mode: Mode,
        /// Use 600000 particles.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, value_enum)]
        amount_unit: Option<UnitArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare an occupancy trajectory with sensor snapshots.
    Evaluate {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render SVG plots of an inference run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<run>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn configure_threads(threads: Option<usize>) -> CliResult<usize> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("`--threads` must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(rayon::current_num_threads())
}

fn verify(dir: &Path) -> CliResult<()> {
    let mismatched = manifest::verify(dir)?;
    if mismatched.is_empty() {
        println!("{}: all outputs match the manifest", dir.display());
        Ok(())
    } else {
        Err(CliError::Io(format!("outputs differ from the manifest: {}", mismatched.join(", "))))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, common, out) = match &cli.command {
        Command::Simulate { common, out, .. } => ("simulate", common, out.clone()),
        Command::Infer { common, out, .. } => ("infer", common, out.clone()),
        Command::Evaluate { common, out, .. } => ("evaluate", common, out.clone()),
        Command::Report { common, out, run, .. } => ("report", common, out.clone().unwrap_or_else(|| run.join("report"))),
    };
    if common.verify {
        return verify(&out);
    }
    let threads = configure_threads(common.threads)?;
    let ctx = Context::new(name, common.seed, threads);
    match &cli.command {
        Command::Simulate { config, out, .. } => commands::simulate(ctx, config, out),
        Command::Infer {
            obs,
            config,
            out,
            mode,
            paper_scale,
            amount_unit,
            ..
        } => commands::infer(
            ctx,
            InferArgs {
                obs,
                config: config.as_deref(),
                out,
                mode: *mode,
                paper_scale: *paper_scale,
                amount_unit: amount_unit.map(|u| match u {
                    UnitArg::Dollars => AmountUnit::Dollars,
                    UnitArg::Minutes => AmountUnit::Minutes,
                }),
            },
        ),
        Command::Evaluate {
            traj, truth, config, out, ..
        } => commands::evaluate(ctx, traj, truth, config.as_deref(), out),
        Command::Report {
            run, truth, config, out, ..
        } => commands::report(ctx, run, truth.as_deref(), config.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("meterflow: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
