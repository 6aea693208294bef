//! `slabpen` command-line front end: simulate, train, reconstruct, evaluate.

mod commands;
mod config;
mod error;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Method, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "slabpen", version, about = "Multislab slab-profile encoding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum)]
    method: Option<Method>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Phantom, profiles and slab measurements, plus a conditioning report.
    Simulate {
        /// Verify the written measurements against the forward model.
        #[arg(long)]
        self_check: bool,
    },
    /// Train the learned energy prior.
    Train,
    /// Reconstruct with lsq, tv or muse.
    Reconstruct,
    /// Score reconstructions against the ground truth.
    Evaluate,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(m) = cli.method {
        cfg.reconstruct.method = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Simulate { self_check } => commands::simulate(&cfg, cli.force, self_check),
        Command::Train => commands::train(&cfg, cli.force),
        Command::Reconstruct => commands::reconstruct(&cfg, cfg.reconstruct.method, cli.force),
        Command::Evaluate => commands::evaluate(&cfg, cli.method, cli.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slabpen: {e}");
            e.exit_code()
        }
    }
}
