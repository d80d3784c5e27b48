use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageNorm, ShadowMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scale to `load_size`², then take a random `crop_size`² window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub load_size: u32,
    pub crop_size: u32,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            load_size: 448,
            crop_size: 400,
            flip: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.load_size {
            return Err(Error::Config(format!(
                "crop_size {} must be in 1..=load_size ({})",
                self.crop_size, self.load_size
            )));
        }
        Ok(())
    }
}

/// The random choices of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub crop_x: u32,
    pub crop_y: u32,
    pub flip: bool,
}

impl AugmentParams {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let span = cfg.load_size - cfg.crop_size;
        Self {
            crop_x: rng.gen_range(0..=span),
            crop_y: rng.gen_range(0..=span),
            flip: cfg.flip && rng.gen_bool(0.5),
        }
    }

    pub fn apply_image(&self, img: &ImageNorm, cfg: &AugmentConfig) -> ImageNorm {
        let scaled = resize_bilinear(img, cfg.load_size, cfg.load_size);
        let cropped = crop(&scaled, self.crop_x, self.crop_y, cfg.crop_size, cfg.crop_size);
        if self.flip {
            flip_horizontal(&cropped)
        } else {
            cropped
        }
    }

    pub fn apply_mask(&self, mask: &ShadowMask, cfg: &AugmentConfig) -> ShadowMask {
        let scaled = mask.resize_nearest(cfg.load_size, cfg.load_size);
        let cropped = scaled.crop(self.crop_x, self.crop_y, cfg.crop_size, cfg.crop_size);
        if self.flip {
            cropped.flip_horizontal()
        } else {
            cropped
        }
    }
}

/// Identical random scale-crop-flip of an image and its mask.
pub fn augment<R: Rng + ?Sized>(
    image: &ImageNorm,
    mask: &ShadowMask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(ImageNorm, ShadowMask)> {
    cfg.validate()?;
    mask.check_same_dims(image.dims())?;
    let params = AugmentParams::sample(cfg, rng);
    Ok((params.apply_image(image, cfg), params.apply_mask(mask, cfg)))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &ImageNorm, width: u32, height: u32) -> ImageNorm {
    if img.dims() == (width, height) {
        return img.clone();
    }
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let (dw, dh) = (width as usize, height as usize);
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(dw, sw);
    let ys = axis(dh, sh);
    let src = img.tensor().data();
    let mut out = Vec::with_capacity(3 * dw * dh);
    for c in 0..3 {
        let p = &src[c * sw * sh..(c + 1) * sw * sh];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * sw + x0] * (1.0 - fx) + p[y0 * sw + x1] * fx;
                let bottom = p[y1 * sw + x0] * (1.0 - fx) + p[y1 * sw + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0));
            }
        }
    }
    ImageNorm::from_tensor(Tensor::from_vec(&[3, dh, dw], out)).expect("interpolation stays in range")
}

pub fn crop(img: &ImageNorm, x0: u32, y0: u32, width: u32, height: u32) -> ImageNorm {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let (x0, y0, w, h) = (x0 as usize, y0 as usize, width as usize, height as usize);
    assert!(x0 + w <= sw && y0 + h <= sh, "crop window outside image");
    let src = img.tensor().data();
    let mut out = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for y in y0..y0 + h {
            let row = (c * sh + y) * sw;
            out.extend_from_slice(&src[row + x0..row + x0 + w]);
        }
    }
    ImageNorm::from_tensor(Tensor::from_vec(&[3, h, w], out)).expect("crop keeps values")
}

pub fn flip_horizontal(img: &ImageNorm) -> ImageNorm {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = img.tensor().clone();
    for row in out.data_mut().chunks_mut(w).take(3 * h) {
        row.reverse();
    }
    ImageNorm::from_tensor(out).expect("flip keeps values")
}
