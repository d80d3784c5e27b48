//! Test-time shadow removal: remover on the masked shadow region, splice back
//! into the image, refiner on the result. The generator is not used.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::config::{EvalConfig, MaskSource};
use crate::data::{compose_embed, load_rgb, mask_region, DatasetIndex, ImageNorm, ShadowMask};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_image, moving_shadow_mask, vmax, ImageMetrics, MetricsReport};
use crate::networks::Network;
use crate::tensor::Tensor;
use crate::trainer::{load_checkpoint, Networks};

/// A stage of the removal pipeline.
#[derive(Clone, Debug)]
pub enum Stage {
    Net(Network<f32>),
    /// Passes its input through: the region for the remover, the first three
    /// channels of the embedding for the refiner.
    Identity,
}

#[derive(Clone, Debug)]
pub struct RemovalModel {
    pub remover: Stage,
    pub refiner: Stage,
    /// Square side images are resized to before inference.
    pub test_size: u32,
}

impl RemovalModel {
    /// Remover and refiner from a training checkpoint.
    pub fn load(checkpoint: &Path, test_size: u32) -> Result<Self> {
        let trainer = load_checkpoint(checkpoint)?;
        Ok(Self::from_networks(&trainer.nets, test_size))
    }

    pub fn from_networks(nets: &Networks, test_size: u32) -> Self {
        Self {
            remover: Stage::Net(nets.remover.clone()),
            refiner: Stage::Net(nets.refiner.clone()),
            test_size,
        }
    }

    pub fn identity(test_size: u32) -> Self {
        Self {
            remover: Stage::Identity,
            refiner: Stage::Identity,
            test_size,
        }
    }

    /// Remove the shadow under `mask` from an image already in working space,
    /// at its own resolution.
    pub fn remove_normalized(&self, image: &ImageNorm, mask: &ShadowMask) -> Result<ImageNorm> {
        mask.check_same_dims(image.dims())?;
        let region = mask_region(image, mask)?;
        let removed = match &self.remover {
            Stage::Net(net) => {
                let out = net.infer(region.tensor())?;
                let masked = crate::autograd::broadcast_mul(&out, &mask.to_tensor());
                mask_region(&ImageNorm::from_tensor_clamped(masked)?, mask)?
            }
            Stage::Identity => region,
        };
        let embedded = compose_embed(&removed, image, mask)?;
        let out = match &self.refiner {
            Stage::Net(net) => net.infer(&embedded)?,
            Stage::Identity => {
                let (h, w) = (image.height() as usize, image.width() as usize);
                Tensor::from_vec(&[3, h, w], embedded.data()[..3 * h * w].to_vec())
            }
        };
        ImageNorm::from_tensor_clamped(out)
    }

    /// Resize to the model resolution, remove the shadow and return 8-bit RGB
    /// at that resolution.
    pub fn remove_shadow(&self, image: &RgbImage, mask: &ShadowMask) -> Result<RgbImage> {
        mask.check_same_dims(image.dimensions())?;
        let s = self.test_size;
        let img = resize_rgb(image, s);
        let m = mask.resize_nearest(s, s);
        Ok(self.remove_normalized(&ImageNorm::from_rgb(&img), &m)?.to_rgb())
    }
}

pub fn resize_rgb(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        img.clone()
    } else {
        imageops::resize(img, size, size, FilterType::Triangle)
    }
}

/// Load image and mask files, run the model and write the result.
pub fn remove_shadow_file(model: &RemovalModel, image: &Path, mask: &Path, out: &Path) -> Result<()> {
    let img = load_rgb(image)?;
    let m = ShadowMask::load(mask)?;
    let result = model.remove_shadow(&img, &m)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    result.save(out).map_err(|source| Error::Image {
        path: out.to_path_buf(),
        source,
    })
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Run the model over a test split and score it against the shadow-free
/// ground truth. Regions are always defined by the ground-truth masks; the
/// masks fed to the model follow `cfg.mask_source`. Results are written to
/// `out_dir` when given.
pub fn evaluate(index: &DatasetIndex, model: &RemovalModel, cfg: &EvalConfig, out_dir: Option<&Path>) -> Result<MetricsReport> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let s = model.test_size;
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for r in &index.records {
        let Some(gt_path) = &r.shadow_free else {
            log::warn!("{}: no shadow-free image, skipped", r.stem);
            skipped.push(r.stem.clone());
            continue;
        };
        let gt_mask = ShadowMask::load(&r.mask)?;
        let input_mask = match cfg.mask_source {
            MaskSource::Gt => gt_mask.clone(),
            MaskSource::Provided => {
                let dir = cfg
                    .mask_dir
                    .as_deref()
                    .ok_or_else(|| Error::Config("eval.mask_dir is not set".into()))?;
                match find_image(dir, &r.stem) {
                    Some(p) => ShadowMask::load(&p)?,
                    None => {
                        log::warn!("{}: no mask in {}, skipped", r.stem, dir.display());
                        skipped.push(r.stem.clone());
                        continue;
                    }
                }
            }
        };
        let image = load_rgb(&r.image)?;
        let out = model.remove_shadow(&image, &input_mask.resize_nearest(image.width(), image.height()))?;
        let gt = resize_rgb(&load_rgb(gt_path)?, s);
        per_image.push(evaluate_image(&r.stem, &out, &gt, &gt_mask.resize_nearest(s, s))?);
        if let Some(dir) = out_dir {
            save_png(&out, &dir.join(format!("{}.png", r.stem)))?;
        }
    }
    Ok(MetricsReport::from_images(per_image, skipped))
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Score every video under `root`. Each video is a directory with `frames/`,
/// per-frame shadow masks in `masks/` (same file stems) and optionally a
/// precomputed `vmax.png`. The reference is the per-pixel maximum image and
/// the region is the moving-shadow mask at `threshold`; videos whose region
/// is empty are skipped.
pub fn evaluate_video(root: &Path, model: &RemovalModel, threshold: f64, out_dir: Option<&Path>) -> Result<MetricsReport> {
    let mut videos: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    videos.sort();
    if videos.is_empty() {
        return Err(Error::Dataset(format!("no <video>/frames directories under {}", root.display())));
    }
    let s = model.test_size;
    let mut per_image: Vec<ImageMetrics> = Vec::new();
    let mut skipped = Vec::new();
    for video in videos {
        let name = video.file_name().and_then(|n| n.to_str()).unwrap_or("video").to_owned();
        let frame_paths = sorted_images(&video.join("frames"))?;
        let frames = frame_paths.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            log::warn!("{name}: no frames, skipped");
            skipped.push(name);
            continue;
        }
        let reference = match find_image(&video, "vmax") {
            Some(p) => load_rgb(&p)?,
            None => vmax(&frames)?,
        };
        let moving = moving_shadow_mask(&frames, &reference, threshold)?.moving.resize_nearest(s, s);
        if moving.is_empty() {
            log::warn!("{name}: empty moving-shadow mask at threshold {threshold}, skipped");
            skipped.push(name);
            continue;
        }
        let reference = resize_rgb(&reference, s);
        let out_video = match out_dir {
            Some(dir) => {
                let d = dir.join(&name);
                fs::create_dir_all(&d)?;
                Some(d)
            }
            None => None,
        };
        for (path, frame) in frame_paths.iter().zip(&frames) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mask = match find_image(&video.join("masks"), stem) {
                Some(p) => ShadowMask::load(&p)?,
                None => {
                    return Err(Error::MissingMask(vec![format!("{name}/{stem}")]));
                }
            };
            let out = model.remove_shadow(frame, &mask)?;
            per_image.push(evaluate_image(&format!("{name}/{stem}"), &out, &reference, &moving)?);
            if let Some(d) = &out_video {
                save_png(&out, &d.join(format!("{stem}.png")))?;
            }
        }
    }
    Ok(MetricsReport::from_images(per_image, skipped))
}

/// Score a directory of results against ground truth, matching files by stem.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, mask_dir: &Path) -> Result<MetricsReport> {
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    for pred_path in sorted_images(pred_dir)? {
        let stem = pred_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        let (Some(gt_path), Some(mask_path)) = (find_image(gt_dir, &stem), find_image(mask_dir, &stem)) else {
            log::warn!("{stem}: missing ground truth or mask, skipped");
            skipped.push(stem);
            continue;
        };
        let pred = load_rgb(&pred_path)?;
        let (w, h) = pred.dimensions();
        let gt = load_rgb(&gt_path)?;
        let gt = if gt.dimensions() == (w, h) {
            gt
        } else {
            imageops::resize(&gt, w, h, FilterType::Triangle)
        };
        let mask = ShadowMask::load(&mask_path)?.resize_nearest(w, h);
        per_image.push(evaluate_image(&stem, &pred, &gt, &mask)?);
    }
    if per_image.is_empty() && skipped.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", pred_dir.display())));
    }
    Ok(MetricsReport::from_images(per_image, skipped))
}
