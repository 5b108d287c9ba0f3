//! `pcn`: generate data, train, detect, evaluate and run the branch
//! ablation. Every command writes a `manifest.txt` into its output
//! directory before doing any work.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pcn_core::experiment::RunConfig;
use pcn_core::Real;

#[derive(Parser, Debug)]
#[command(name = "pcn", version, about = "Part and context pedestrian detector")]
pub struct Cli {
    /// key=value configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset.
    Gen {
        /// Defaults to the configured `train_images`.
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Train stages in order: `1`, `2`, `3`, and `context` for the
    /// context-only refits used by the ablation.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        stages: Vec<String>,
        /// Directory holding earlier stage checkpoints (default: --out).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Run the detector over a dataset.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fusion weights of the original, part and context branches.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        branch_weights: Option<Vec<Real>>,
    },
    /// Miss-rate curves and a summary table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// reasonable|all|occ-none|occ-partial|occ-heavy|over75; repeatable.
        /// Defaults to all six.
        #[arg(long = "setting")]
        settings: Vec<String>,
    },
    /// One summary row per ablation variant.
    Ablate {
        /// Evaluation dataset.
        #[arg(long)]
        data: PathBuf,
        /// Directory with the checkpoints written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// base, part_avg, part_lstm, context:S, maxout, full
        /// (default: all rows).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Re-run the command recorded in a manifest with its configuration
    /// snapshot.
    Replay { manifest: PathBuf },
}

fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        let m = manifest::RunManifest::read(manifest)?;
        let mut replay_args = vec!["pcn".to_string()];
        replay_args.extend(m.args.iter().cloned());
        let mut inner = Cli::try_parse_from(&replay_args).context("manifest arguments no longer parse")?;
        if cli.out.is_some() {
            inner.out = cli.out.clone();
        }
        let cfg = RunConfig::parse(&m.config, &manifest.display().to_string())?;
        return commands::dispatch(&inner, cfg, m.args);
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    commands::dispatch(&cli, cfg, args)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
