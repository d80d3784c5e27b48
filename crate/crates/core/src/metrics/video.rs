//! Video protocol: a per-pixel maximum image serves as the shadow-free
//! reference and evaluation is restricted to pixels a shadow moves across.

use image::RgbImage;

use crate::data::ShadowMask;
use crate::error::{Error, Result};

/// Per-pixel, per-channel maximum over all frames.
pub fn vmax(frames: &[RgbImage]) -> Result<RgbImage> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("vmax of an empty frame sequence".into()))?;
    let mut out = first.clone();
    for (i, f) in frames.iter().enumerate().skip(1) {
        if f.dimensions() != out.dimensions() {
            return Err(Error::Shape(format!(
                "frame {i} is {:?}, expected {:?}",
                f.dimensions(),
                out.dimensions()
            )));
        }
        for (o, &v) in out.iter_mut().zip(f.as_raw()) {
            *o = (*o).max(v);
        }
    }
    Ok(out)
}

/// ITU-R BT.601 luma.
pub fn grayscale_bt601(p: [u8; 3]) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MovingShadow {
    /// Pixels whose luma is more than `threshold` below the maximum image.
    pub per_frame: Vec<ShadowMask>,
    /// Pixels shadowed in at least one frame and lit in at least one other.
    pub moving: ShadowMask,
}

pub fn moving_shadow_mask(frames: &[RgbImage], vmax_img: &RgbImage, threshold: f64) -> Result<MovingShadow> {
    if !(threshold > 0.0 && threshold < 255.0) {
        return Err(Error::InvalidInput(format!(
            "moving-shadow threshold must lie in (0, 255), got {threshold}"
        )));
    }
    let (w, h) = vmax_img.dimensions();
    let reference: Vec<f64> = vmax_img.pixels().map(|p| grayscale_bt601(p.0)).collect();
    let mut per_frame = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        if f.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "frame {i} is {:?}, maximum image is {:?}",
                f.dimensions(),
                (w, h)
            )));
        }
        let data = f
            .pixels()
            .zip(&reference)
            .map(|(p, &r)| r - grayscale_bt601(p.0) > threshold)
            .collect();
        per_frame.push(ShadowMask::from_vec(w, h, data)?);
    }
    let n = w as usize * h as usize;
    let mut ever_shadow = vec![false; n];
    let mut ever_lit = vec![false; n];
    for m in &per_frame {
        for (i, &v) in m.values().iter().enumerate() {
            if v {
                ever_shadow[i] = true;
            } else {
                ever_lit[i] = true;
            }
        }
    }
    let moving = ShadowMask::from_vec(
        w,
        h,
        ever_shadow.iter().zip(&ever_lit).map(|(&s, &l)| s && l).collect(),
    )?;
    Ok(MovingShadow { per_frame, moving })
}
