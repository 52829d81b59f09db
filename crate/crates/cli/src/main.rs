//! `dtpdt` — synthesize tubular-tree datasets, train with the
//! topology-preserving loss stack, evaluate, and export distance maps.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric
//! invariant violation. Errors print one machine-parsable line to stderr:
//! `E<code>: <message>`.

mod dataset;
mod verbs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dtpdt_core::config::RunConfig;
use dtpdt_core::error::{Error, Result};

#[derive(Parser)]
#[command(name = "dtpdt", version, about = "topology-preserving distance-transform training stack")]
struct Cli {
    /// Plain-text `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override both the synthesis and training seeds
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic airway-tree dataset (volumes + manifest)
    Synth {
        /// Number of volumes
        #[arg(long)]
        count: Option<usize>,
        /// Cubic volume edge length in voxels
        #[arg(long)]
        dims: Option<usize>,
    },
    /// Train on a dataset directory, validating every epoch
    Train {
        /// Training dataset directory (from `synth`)
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset directory
        #[arg(long)]
        val: PathBuf,
        /// Loss selection: `dtpdt` (default) or `dice-only`
        #[arg(long)]
        loss: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        /// Checkpoint RVOL file (with its .manifest.json next to it)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
    },
    /// Export smooth and exact distance maps for a binary RVOL volume
    Dist {
        /// Input binary volume (.rvol)
        #[arg(long)]
        volume: PathBuf,
        /// Optional binary baseline volume to diff against
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Print a summary of an eval report and/or training log
    Report {
        /// Path to eval_report.json
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Path to train_log.json
        #[arg(long)]
        train_log: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config("--out <dir> is required for this verb".into()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.verb {
        Verb::Synth { count, dims } => {
            let mut cfg = resolve_config(&cli)?;
            if let Some(c) = count {
                cfg.synth.count = *c;
            }
            if let Some(d) = dims {
                cfg.synth.dims = *d;
            }
            cfg.validate()?;
            verbs::run_synth(&cfg, &out_dir(&cli)?, cli.force)
        }
        Verb::Train { data, val, loss } => {
            let mut cfg = resolve_config(&cli)?;
            if let Some(mode) = loss {
                match mode.as_str() {
                    "dtpdt" => cfg.train.loss = dtpdt_core::train::LossMode::Dtpdt,
                    "dice-only" => cfg.train.loss = dtpdt_core::train::LossMode::DiceOnly,
                    other => {
                        return Err(Error::Config(format!(
                            "--loss expects dtpdt or dice-only, got {other:?}"
                        )))
                    }
                }
            }
            cfg.validate()?;
            verbs::run_train(&cfg, data, val, &out_dir(&cli)?, cli.force)
        }
        Verb::Eval { checkpoint, data } => {
            let cfg = resolve_config(&cli)?;
            verbs::run_eval(&cfg, checkpoint, data, &out_dir(&cli)?, cli.force)
        }
        Verb::Dist { volume, baseline } => {
            let cfg = resolve_config(&cli)?;
            verbs::run_dist(&cfg, volume, baseline.as_deref(), &out_dir(&cli)?, cli.force)
        }
        Verb::Report { eval, train_log } => {
            verbs::run_report(eval.as_deref(), train_log.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.exit_code();
            eprintln!("E{code}: {err}");
            ExitCode::from(code as u8)
        }
    }
}
