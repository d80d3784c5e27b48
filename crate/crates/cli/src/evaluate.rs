use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deshadow_core::config::{Config, MaskSource};
use deshadow_core::data::{load_dataset, Split};
use deshadow_core::inference::{evaluate, evaluate_dirs, evaluate_video, remove_shadow_file, RemovalModel};
use deshadow_core::metrics::MetricsReport;
use deshadow_core::synth;
use deshadow_core::trainer::load_checkpoint;

use crate::common::{data_root, new_run_dir, require_dir, require_file, usage};
use crate::DataArgs;

#[derive(clap::Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Binary shadow mask (pixels above 127 are shadow).
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Side length the image is resized to; defaults to the checkpoint's eval.test_size.
    #[arg(long)]
    test_size: Option<u32>,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Masks fed to the model instead of the ground-truth ones (same file stems).
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    #[arg(long)]
    test_size: Option<u32>,
    /// Score only the first N test images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Do not write result images.
    #[arg(long)]
    no_images: bool,
}

#[derive(clap::Args, Debug)]
pub struct VideoEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of videos, each with frames/ and masks/ (and optionally vmax.png).
    #[arg(long)]
    video_root: PathBuf,
    /// Luma drop below the maximum image that counts as shadow; defaults to eval.video_threshold.
    #[arg(long)]
    threshold: Option<u8>,
    #[arg(long)]
    test_size: Option<u32>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    no_images: bool,
}

#[derive(clap::Args, Debug)]
pub struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write this many test images (seeded after the training ones).
    #[arg(long, default_value_t = 0)]
    test_count: usize,
}

fn load_model(checkpoint: &Path, test_size: Option<u32>) -> Result<(RemovalModel, Config)> {
    require_file(checkpoint, "checkpoint")?;
    let trainer = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let size = test_size.unwrap_or(trainer.config.eval.test_size);
    if size < 8 || size % 4 != 0 {
        return Err(usage(format!("test size must be a multiple of 4 and at least 8, got {size}")));
    }
    Ok((RemovalModel::from_networks(&trainer.nets, size), trainer.config))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn report_summary(r: &MetricsReport) -> String {
    format!(
        "images {} (skipped {}); LAB MAE shadow {} non-shadow {} all {}; PSNR shadow {} all {}; SSIM shadow {} all {}",
        r.per_image.len(),
        r.skipped.len(),
        fmt_opt(r.rmse_shadow),
        fmt_opt(r.rmse_nonshadow),
        fmt_opt(r.rmse_all),
        fmt_opt(r.psnr_shadow),
        fmt_opt(r.psnr_all),
        fmt_opt(r.ssim_shadow),
        fmt_opt(r.ssim_all)
    )
}

fn save_report(r: &MetricsReport, dir: &Path) -> Result<()> {
    r.save(&dir.join("metrics.csv"), &dir.join("metrics.json"))?;
    log::info!("{}", report_summary(r));
    println!("{}", dir.display());
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    require_file(&a.image, "image")?;
    require_file(&a.mask, "mask")?;
    let (model, _) = load_model(&a.checkpoint, a.test_size)?;
    remove_shadow_file(&model, &a.image, &a.mask, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.checkpoint, a.test_size)?;
    let root = data_root(&a.data, &cfg)?;
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.test_size = model.test_size;
    if let Some(dir) = &a.mask_dir {
        require_dir(dir, "mask directory")?;
        eval_cfg.mask_source = MaskSource::Provided;
        eval_cfg.mask_dir = Some(dir.clone());
    }
    if eval_cfg.mask_source == MaskSource::Provided && eval_cfg.mask_dir.is_none() {
        return Err(usage("eval.mask_source is provided but no --mask-dir was given"));
    }
    let mut index = load_dataset(&root, Split::Test)?;
    if let Some(n) = a.limit {
        index = index.truncated(n);
    }
    let dir = new_run_dir(&a.out, "eval", &format!("{}{}", a.checkpoint.display(), root.display()))?;
    let images = (!a.no_images).then(|| dir.join("images"));
    let report = evaluate(&index, &model, &eval_cfg, images.as_deref())?;
    save_report(&report, &dir)
}

pub fn video_eval(a: VideoEvalArgs) -> Result<()> {
    require_dir(&a.video_root, "video root")?;
    let (model, cfg) = load_model(&a.checkpoint, a.test_size)?;
    let threshold = a.threshold.unwrap_or(cfg.eval.video_threshold);
    if threshold == 0 || threshold == 255 {
        return Err(usage("threshold must lie in 1..=254"));
    }
    let dir = new_run_dir(&a.out, "video-eval", &format!("{}{}", a.checkpoint.display(), a.video_root.display()))?;
    let images = (!a.no_images).then(|| dir.join("images"));
    let report = evaluate_video(&a.video_root, &model, f64::from(threshold), images.as_deref())?;
    save_report(&report, &dir)
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    for (p, what) in [(&a.pred, "prediction directory"), (&a.gt, "ground-truth directory"), (&a.mask, "mask directory")] {
        require_dir(p, what)?;
    }
    let report = evaluate_dirs(&a.pred, &a.gt, &a.mask)?;
    let dir = new_run_dir(
        &a.out,
        "metrics",
        &format!("{}{}{}", a.pred.display(), a.gt.display(), a.mask.display()),
    )?;
    save_report(&report, &dir)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.size < 8 {
        return Err(usage("size must be at least 8"));
    }
    synth::write_dataset(&a.out, "train", a.count, a.size, a.seed)?;
    if a.test_count > 0 {
        synth::write_dataset(&a.out, "test", a.test_count, a.size, a.seed.wrapping_add(a.count as u64))?;
    }
    println!("{}", a.out.display());
    Ok(())
}
