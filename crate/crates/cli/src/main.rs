use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pvm_cli::commands::{cmd_ablate_padding, cmd_eval, cmd_maskgen, cmd_train, cmd_verify, UsageError};
use pvm_cli::config::ExperimentConfig;
use pvm_core::datagen::Regime;

#[derive(Parser)]
#[command(name = "pvm", version, about = "Partial Vision Mamba experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suites.
    Verify {
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every configured variant and seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train this seed only.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config and PVM_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under full-image stress masks.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// easy, hard or extreme; all three when omitted.
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Seed of the stress masks.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one mask as PVMT and P5 files.
    Maskgen {
        #[arg(long, value_parser = parse_regime, default_value = "hard")]
        regime: Regime,
        /// Sample pixels independently at this density instead.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path stem; `.pvmt` and `.pgm` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare zero, mean and learned token padding on a depth config.
    AblatePadding {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    Regime::parse(s).ok_or_else(|| format!("unknown regime {s:?}; expected easy, hard or extreme"))
}

fn load(config: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { suite, seed } => Ok(cmd_verify(suite.as_deref(), seed)?.iter().all(|r| r.passed)),
        Command::Train { config, seed, out } => cmd_train(&load(&config, out)?, seed).map(|_| true),
        Command::Eval {
            config,
            checkpoint,
            regime,
            seed,
            out,
        } => cmd_eval(&load(&config, out)?, &checkpoint, regime, seed).map(|_| true),
        Command::Maskgen {
            regime,
            density,
            size,
            seed,
            out,
        } => cmd_maskgen(regime, density, size, seed, &out).map(|_| true),
        Command::AblatePadding { config, seed, out } => cmd_ablate_padding(&load(&config, out)?, seed).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
