//! Command-line entry point: config loading, overrides, and subcommands.
//!
//! Every command echoes its merged config into the output directory, and
//! that echo alone reproduces the outputs.

mod commands;
mod config;
mod gradcheck;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::*;
pub use config::*;
pub use gradcheck::{format_table, gradcheck, gradcheck_arch, GradRow, GRADCHECK_TOL};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "lssdm",
    version,
    about = "Latent-space diffusion imputation for sensor networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Args, Default)]
pub struct Flags {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `runs/<timestamp>-seed<seed>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub n_samples: Option<usize>,
    /// Write per-step sampler statistics.
    #[arg(long, global = true)]
    pub trace: bool,
    /// Perturb analytic gradients in `gradcheck` (negative control).
    #[arg(long, hide = true, global = true)]
    pub corrupt_gradient: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic sensor network and its readings.
    Synth,
    /// Write the evaluation mask of every split.
    Mask,
    /// Train the autoencoder and the denoiser.
    Train,
    /// Fill every missing cell of the input CSV.
    Impute,
    /// Score the model on the test split.
    Eval,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Averaged latent statistics per window and missing rate.
    LatentDump,
}

impl Flags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            workers: self.workers,
            checkpoint: self.checkpoint.clone(),
            n_samples: self.n_samples,
            trace: self.trace,
        }
    }
}

/// The merged and validated config for `flags`.
pub fn resolve_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&flags.overrides());
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.flags)?;
    let out = cfg.out_dir();
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &out),
        Command::Mask => cmd_mask(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out).map(drop),
        Command::Impute => cmd_impute(&cfg, &out),
        Command::Eval => cmd_eval(&cfg, &out).map(drop),
        Command::Gradcheck => {
            let rows = cmd_gradcheck(&cfg, cfg.out.as_deref(), cli.flags.corrupt_gradient)?;
            match rows.iter().find(|r| !r.passed()) {
                Some(r) => Err(Error::Contract(format!("gradient check failed for {}", r.component))),
                None => Ok(()),
            }
        }
        Command::LatentDump => cmd_latent_dump(&cfg, &out).map(drop),
    }
}

/// Runs the parsed command and maps failures to exit codes.
pub fn main_with(cli: Cli) -> i32 {
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
