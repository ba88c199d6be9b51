use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protoego::commands::{cmd_eval, cmd_extract_attn, cmd_gen_synthetic, cmd_train, TrainOptions};
use protoego::config::{load_config, RunConfig};
use protoego::error::Result;

#[derive(Parser)]
#[command(name = "protoego", version, about = "Self-supervised ViT pretraining on egocentric clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set temporal.lambda=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        match &self.config {
            Some(path) => load_config(path, &overrides),
            None => RunConfig::from_toml_str("", &overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train student and teacher, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stop after this many iterations in total.
        #[arg(long)]
        iters: Option<u64>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep a numbered checkpoint every N iterations.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Localization IoU, k-NN probe, attention maps and loss plots.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; the seeded initialization is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics CSV to plot.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Dump per-head soft maps and masks as grayscale PNGs.
    ExtractAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the synthetic dataset as frame directories.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            iters,
            resume,
            checkpoint_every,
        } => {
            let cfg = common.resolve()?;
            let opts = TrainOptions {
                until: iters,
                resume,
                checkpoint_every,
            };
            let summary = cmd_train(&cfg, &common.out, &opts)?;
            if let Some(last) = summary.bundles.last() {
                println!("iteration {}: {}", summary.state.iteration, last.describe());
            }
            println!("checkpoint: {}", summary.checkpoint.display());
            println!("metrics: {}", summary.metrics.display());
        }
        Command::Eval {
            common,
            checkpoint,
            metrics,
        } => {
            let cfg = common.resolve()?;
            let report = cmd_eval(&cfg, checkpoint.as_deref(), metrics.as_deref(), &common.out)?;
            println!("mean best-head IoU: {:.4}", report.localization.mean_best_iou);
            println!("k-NN accuracy: {:.4}", report.knn_accuracy);
        }
        Command::ExtractAttn { common, checkpoint } => {
            let cfg = common.resolve()?;
            let files = cmd_extract_attn(&cfg, checkpoint.as_deref(), &common.out)?;
            println!("wrote {} images to {}", files.len(), common.out.display());
        }
        Command::GenSynthetic { common } => {
            let cfg = common.resolve()?;
            let hash = cmd_gen_synthetic(&cfg, &common.out)?;
            println!("{hash}  {}", Path::new(&common.out).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
