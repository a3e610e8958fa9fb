//! Command-line front end for brain-conditioned image decoding experiments.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use neurodecode::config::ExperimentConfig;
use neurodecode::pipeline::{self, Ablation};

#[derive(Parser, Debug)]
#[command(name = "neurodecode", version, about = "Decode images from parcel-wise brain responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration file; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed, overriding the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root, overriding `output_dir` from the configuration
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the decoder and fit the brain encoder
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate, rank and evaluate reconstructions of the held-out split
    Decode {
        #[command(flatten)]
        common: Common,
        /// Train run directory or checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Parcel contributions and ROI heatmaps from the traces of a decode run
    Interpret {
        #[command(flatten)]
        common: Common,
        /// Decode run directory holding `traces/` and `atlas.tsv`
        run: PathBuf,
    },
    /// Train and compare model variants
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of token_dropout, linear_mapper, parcels_p, dim_f, n_candidates, roi_masking
        which: String,
    },
    /// Write the synthetic dataset as an on-disk archive
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Gather metric tables of earlier runs into one document
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories to include
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train { common } => {
            let (cfg, out) = load_config(&common)?;
            Ok(pipeline::cmd_train(&cfg, &out)?)
        }
        Command::Decode { common, checkpoint } => {
            let (cfg, out) = load_config(&common)?;
            exists(&checkpoint)?;
            pipeline::cmd_decode(&cfg, &checkpoint, &out).with_context(|| format!("decoding with {}", checkpoint.display()))
        }
        Command::Interpret { common, run } => {
            let (cfg, out) = load_config(&common)?;
            exists(&run)?;
            Ok(pipeline::cmd_interpret(&cfg, &run, &out)?)
        }
        Command::Ablate { common, which } => {
            let which: Ablation = which.parse()?;
            let (cfg, out) = load_config(&common)?;
            Ok(pipeline::cmd_ablate(&cfg, which, &out)?)
        }
        Command::Datagen { common } => {
            let (cfg, out) = load_config(&common)?;
            Ok(pipeline::cmd_datagen(&cfg, &out)?)
        }
        Command::Report { common, runs } => {
            let (_, out) = load_config(&common)?;
            Ok(pipeline::cmd_report(&runs, &out)?)
        }
    }
}

fn exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(neurodecode::Error::Config { field: "path".into(), reason: format!("{} does not exist", path.display()) }.into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| matches!(e.downcast_ref::<neurodecode::Error>(), Some(neurodecode::Error::Config { .. })));
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
