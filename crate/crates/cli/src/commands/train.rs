use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use tilemark_core::augment::expand_training_set;
use tilemark_core::checkpoint::save_checkpoint;
use tilemark_core::data::load_dataset;
use tilemark_core::train::{train, write_train_log};

use crate::config::RunConfig;

#[derive(Args)]
pub struct TrainArgs {
    /// Run-configuration file
    #[arg(long)]
    pub config: PathBuf,
    /// Training dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    pub out: PathBuf,
    /// Validation dataset directory (overrides the config's val_dir)
    #[arg(long)]
    pub val_data: Option<PathBuf>,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config = RunConfig::parse(&text)?;

    let mut train_set = load_dataset(&args.data)?;
    let val_dir = args.val_data.clone().or(config.data.val_dir.clone());
    let val_set = match val_dir {
        Some(dir) => load_dataset(&dir)?,
        None => {
            let n = train_set.len();
            let n_val = ((n as f64 * config.data.val_split).round() as usize).max(1);
            if n_val >= n {
                bail!(
                    "cannot hold out {n_val} of {n} samples for validation; \
                     provide --val-data or lower val_split"
                );
            }
            train_set.split_off(n - n_val)
        }
    };
    if config.data.augment_factor > 1 {
        train_set = expand_training_set(
            &train_set,
            config.data.augment_factor,
            config.data.augment_seed,
        )?;
    }

    println!(
        "training {} on {} samples ({} validation), {} epochs",
        config.train.model.kind_name(),
        train_set.len(),
        val_set.len(),
        config.train.max_epochs
    );
    let outcome = train(&config.train, &train_set, &val_set)?;
    save_checkpoint(&outcome.checkpoint, &args.out)?;
    let log_path = args
        .out
        .parent()
        .map(|p| p.join("train_log.csv"))
        .unwrap_or_else(|| PathBuf::from("train_log.csv"));
    write_train_log(&log_path, &outcome.logs)?;

    println!(
        "best val loss {:.6} at epoch {} ({} epochs run); checkpoint: {}",
        outcome.checkpoint.best_val_loss,
        outcome.checkpoint.epoch,
        outcome.logs.len(),
        args.out.display()
    );
    Ok(())
}
