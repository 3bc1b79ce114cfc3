use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use oreyolo::augment::{expand_dataset, AugmentPolicy};
use oreyolo::data::{load_dataset, save_sample, split_dataset};
use oreyolo::profile::profile_config;
use oreyolo::runner::{evaluate_model, load_model, predict, train};
use oreyolo::synthetic::generate_synthetic;
use oreyolo::TrainConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "oreyolo",
    about = "Lightweight single-stage ore detector: train, evaluate, predict, profile."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory (images/ + labels/).
    Train {
        /// Flat key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root containing images/ and labels/.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, logs, and split manifests.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Train on one fixed batch until the loss collapses (sanity check).
        #[arg(long)]
        overfit_one_batch: bool,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate; the split is re-derived from the
        /// checkpoint's seed, matching the training-time manifests.
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        /// Optional CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run detection on images and write annotated copies plus detections.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files to annotate.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value = "runs/predict")]
        out: PathBuf,
    },
    /// Report parameter count, GFLOPs, and measured FPS for a config.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of timed forward passes for the FPS estimate.
        #[arg(long, default_value = "3")]
        timed_runs: usize,
    },
    /// Generate a synthetic two-class dataset.
    GenSynthetic {
        /// Number of images.
        #[arg(long, default_value = "200")]
        n: usize,
        #[arg(long, default_value = "runs/synthetic")]
        out: PathBuf,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, default_value = "640")]
        image_size: usize,
        /// Also write this many augmented copies per image (offline
        /// expansion with the six-strategy policy).
        #[arg(long, default_value = "0")]
        augment_copies: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            seed,
            overfit_one_batch,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let samples = load_dataset(&data)?;
            if samples.is_empty() {
                bail!("dataset at {} has no images", data.display());
            }
            println!(
                "training on {} samples, input {}px, {} epochs",
                samples.len(),
                cfg.model.input_size,
                cfg.epochs
            );
            let report = train(&cfg, samples, &out, overfit_one_batch)?;
            if overfit_one_batch {
                println!(
                    "overfit: loss {:.4} -> {:.4} in {} steps",
                    report.initial_loss, report.final_loss, report.steps_run
                );
            } else {
                println!(
                    "trained {} epochs ({} steps); best val mAP50 {:.4}",
                    report.epochs_run, report.steps_run, report.best_map50
                );
            }
            println!("checkpoints: {}", report.last_checkpoint.display());
            println!("log: {}", out.join("train_log.csv").display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let (cfg, model, _vars, epoch) = load_model(&checkpoint)?;
            let samples = load_dataset(&data)?;
            let (train_s, val_s, test_s) = split_dataset(samples, (0.7, 0.2, 0.1), cfg.seed)?;
            let subset = match split {
                Split::Train => train_s,
                Split::Val => val_s,
                Split::Test => test_s,
            };
            let result = evaluate_model(&model, &subset, &cfg)?;
            println!("checkpoint epoch {epoch}, {} images", subset.len());
            print!("{}", result.to_kv());
            if let Some(path) = out {
                std::fs::write(&path, result.to_csv())
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("report: {}", path.display());
            }
        }
        Command::Predict {
            checkpoint,
            images,
            out,
        } => {
            let results = predict(&checkpoint, &images, &out)?;
            for (path, count) in results {
                println!("{}: {count} detections", path.display());
            }
        }
        Command::Profile { config, timed_runs } => {
            let cfg = load_config(&config)?;
            let report = profile_config(&cfg.model, timed_runs)?;
            print!("{}", report.to_kv());
        }
        Command::GenSynthetic {
            n,
            out,
            seed,
            image_size,
            augment_copies,
        } => {
            let samples = generate_synthetic(n, seed, image_size)?;
            let samples = if augment_copies > 0 {
                let mut policy = AugmentPolicy::default();
                policy.copies_per_image = augment_copies;
                expand_dataset(&samples, &policy, seed)?
            } else {
                samples
            };
            for s in &samples {
                save_sample(&out, s)?;
            }
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
    }
    Ok(())
}
