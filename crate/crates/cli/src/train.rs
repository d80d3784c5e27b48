use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use deshadow_core::config::Config;
use deshadow_core::data::{load_dataset, DatasetIndex, Split};
use deshadow_core::trainer::{load_checkpoint, RunSummary, Trainer};

use crate::common::{apply_overrides, data_root, load_config, new_run_dir, require_file};
use crate::{ConfigArgs, DataArgs};

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Parent directory for new run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Write into this directory instead of a new timestamped one.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from a checkpoint; --set overrides apply on top of its config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Log every N steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

pub fn training_set(cfg: &Config, root: &std::path::Path) -> Result<DatasetIndex> {
    let mut index = load_dataset(root, Split::Train)?;
    if let Some(n) = cfg.data.limit {
        index = index.truncated(n);
    }
    Ok(index)
}

/// Train `trainer` on `index`, writing everything into `dir`.
pub fn train_into(
    trainer: &mut Trainer,
    index: &DatasetIndex,
    dir: &std::path::Path,
    resumed_from: Option<&std::path::Path>,
    log_every: usize,
) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), trainer.config.to_toml_string())?;
    let every = log_every.max(1);
    let summary = trainer.run_with(index, Some(dir), resumed_from, |r| {
        if r.step % every == 0 {
            log::info!(
                "step {} epoch {} total {:.4} gan {:.4} iden {:.4} rem {:.4} full {:.4} area {:.4} dis {:.4}",
                r.step,
                r.epoch,
                r.total,
                r.gan,
                r.iden,
                r.rem,
                r.full,
                r.area,
                r.dis
            );
        }
    })?;
    Ok(summary)
}

pub fn run(args: TrainArgs) -> Result<()> {
    let (mut trainer, dir) = match &args.resume {
        Some(ck) => {
            require_file(ck, "checkpoint")?;
            let mut t = load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
            if args.config.config.is_some() {
                log::warn!("--config is ignored when resuming; the checkpoint's config is used");
            }
            apply_overrides(&mut t.config, &args.config.overrides)?;
            let dir = match &args.run_dir {
                Some(d) => d.clone(),
                None => ck.parent().map(PathBuf::from).unwrap_or_default(),
            };
            (t, dir)
        }
        None => {
            let mut cfg = load_config(&args.config)?;
            cfg.data.root = Some(data_root(&args.data, &cfg)?);
            let dir = match &args.run_dir {
                Some(d) => d.clone(),
                None => new_run_dir(&args.out, "train", &cfg.to_toml_string())?,
            };
            (Trainer::new(cfg)?, dir)
        }
    };
    let root = data_root(&args.data, &trainer.config)?;
    let index = training_set(&trainer.config, &root)?;
    log::info!("{} training images from {}, run directory {}", index.len(), root.display(), dir.display());
    let summary = train_into(&mut trainer, &index, &dir, args.resume.as_deref(), args.log_every)?;
    if let Some(last) = summary.history.last() {
        log::info!("finished at step {} with total {:.4}", last.step + 1, last.total);
    }
    println!("{}", dir.display());
    Ok(())
}
