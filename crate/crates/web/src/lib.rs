//! Browser bindings for the interactive demo: mask dilation, region-pair
//! sampling and the moving-shadow mask of a synthetic video.

use deshadow_core::data::{dilate_mask, sample_region_pair, ImageNorm, ShadowMask};
use deshadow_core::metrics::{moving_shadow_mask, vmax};
use deshadow_core::synth::{composite, Composite};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const POOL_SIZE: u64 = 24;

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect()
}

fn tint(p: &mut Rgb<u8>, color: [u8; 3], amount: f32) {
    for c in 0..3 {
        p.0[c] = (f32::from(p.0[c]) * (1.0 - amount) + f32::from(color[c]) * amount).round() as u8;
    }
}

/// A synthetic shadow image with its mask and a pool of other masks.
#[wasm_bindgen]
pub struct Scene {
    comp: Composite,
    pool: Vec<ShadowMask>,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, seed: u64) -> Scene {
        let size = size.clamp(16, 512);
        let pool = (1..=POOL_SIZE).map(|k| composite(size, seed.wrapping_add(k * 7919)).mask).collect();
        Scene {
            comp: composite(size, seed),
            pool,
        }
    }

    pub fn size(&self) -> u32 {
        self.comp.shadow.width()
    }

    pub fn shadow_area(&self) -> u32 {
        self.comp.mask.area() as u32
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        rgba(&self.comp.shadow)
    }

    pub fn shadow_free_rgba(&self) -> Vec<u8> {
        rgba(&self.comp.shadow_free)
    }

    pub fn dilated_area(&self, tau: u32) -> u32 {
        dilate_mask(&self.comp.mask, tau as usize).area() as u32
    }

    /// The image with the shadow mask in red and the band added by a
    /// `tau`×`tau` dilation in yellow.
    pub fn dilation_rgba(&self, tau: u32) -> Vec<u8> {
        let dilated = dilate_mask(&self.comp.mask, tau as usize);
        let mut img = self.comp.shadow.clone();
        for (x, y, p) in img.enumerate_pixels_mut() {
            if self.comp.mask.get(x, y) {
                tint(p, [220, 40, 40], 0.45);
            } else if dilated.get(x, y) {
                tint(p, [250, 210, 30], 0.6);
            }
        }
        rgba(&img)
    }

    /// Draw one training pair; the sampled non-shadow region is shown in green.
    pub fn sample_pair(&self, alpha: f64, seed: u64) -> Result<PairView, JsError> {
        let image = ImageNorm::from_rgb(&self.comp.shadow);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = sample_region_pair(&image, &self.comp.mask, &self.pool, alpha, &mut rng)?;
        let mut img = self.comp.shadow.clone();
        for (x, y, p) in img.enumerate_pixels_mut() {
            if self.comp.mask.get(x, y) {
                tint(p, [220, 40, 40], 0.45);
            } else if pair.sample_mask.get(x, y) {
                tint(p, [40, 200, 80], 0.55);
            }
        }
        Ok(PairView {
            rgba: rgba(&img),
            ratio: pair.area_ratio(),
            fallback: pair.fallback_used,
            sample_area: pair.sample_mask.area() as u32,
        })
    }
}

#[wasm_bindgen]
pub struct PairView {
    rgba: Vec<u8>,
    pub ratio: f64,
    pub fallback: bool,
    pub sample_area: u32,
}

#[wasm_bindgen]
impl PairView {
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

/// Frames of a static scene crossed by a moving elliptical shadow.
pub fn video_frames(size: u32, seed: u64, count: u32) -> Vec<RgbImage> {
    let background = composite(size, seed).shadow_free;
    let s = f64::from(size);
    (0..count)
        .map(|f| {
            let t = f64::from(f) / f64::from(count.max(2) - 1);
            let (cx, cy) = (s * (0.2 + 0.6 * t), s * (0.4 + 0.2 * t));
            let (ax, ay) = (0.22 * s, 0.15 * s);
            let mut frame = background.clone();
            for (x, y, p) in frame.enumerate_pixels_mut() {
                let (dx, dy) = ((f64::from(x) + 0.5 - cx) / ax, (f64::from(y) + 0.5 - cy) / ay);
                if dx * dx + dy * dy <= 1.0 {
                    p.0 = p.0.map(|v| (f64::from(v) * 0.4).round() as u8);
                }
            }
            frame
        })
        .collect()
}

/// A synthetic video and its per-pixel maximum image.
#[wasm_bindgen]
pub struct Video {
    frames: Vec<RgbImage>,
    vmax: RgbImage,
}

#[wasm_bindgen]
impl Video {
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, seed: u64, count: u32) -> Result<Video, JsError> {
        let frames = video_frames(size.clamp(16, 512), seed, count.clamp(2, 64));
        let vmax = vmax(&frames)?;
        Ok(Video { frames, vmax })
    }

    pub fn len(&self) -> u32 {
        self.frames.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_rgba(&self, index: u32) -> Vec<u8> {
        let i = (index as usize).min(self.frames.len() - 1);
        rgba(&self.frames[i])
    }

    /// The maximum image with the moving-shadow region at `threshold` in magenta.
    pub fn moving_rgba(&self, threshold: f64) -> Result<Vec<u8>, JsError> {
        let moving = moving_shadow_mask(&self.frames, &self.vmax, threshold)?.moving;
        let mut img = self.vmax.clone();
        for (x, y, p) in img.enumerate_pixels_mut() {
            if moving.get(x, y) {
                tint(p, [210, 40, 200], 0.55);
            }
        }
        Ok(rgba(&img))
    }

    pub fn moving_area(&self, threshold: f64) -> Result<u32, JsError> {
        Ok(moving_shadow_mask(&self.frames, &self.vmax, threshold)?.moving.area() as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_grows_with_tau() {
        let scene = Scene::new(64, 3);
        let areas: Vec<u32> = [0, 1, 5, 15].iter().map(|&t| scene.dilated_area(t)).collect();
        assert_eq!(areas[0], scene.shadow_area());
        assert_eq!(areas[1], scene.shadow_area());
        assert!(areas[2] > areas[1] && areas[3] > areas[2]);
        assert_eq!(scene.dilation_rgba(5).len(), 64 * 64 * 4);
    }

    #[test]
    fn sampled_pairs_respect_the_ratio() {
        let scene = Scene::new(64, 5);
        for seed in 0..10 {
            let pair = scene.sample_pair(0.2, seed).unwrap();
            if !pair.fallback {
                assert!(pair.ratio > 0.8 && pair.ratio < 1.2, "{}", pair.ratio);
            }
        }
    }

    #[test]
    fn moving_region_shrinks_as_the_threshold_rises() {
        let video = Video::new(48, 2, 8).unwrap();
        assert_eq!(video.len(), 8);
        let low = video.moving_area(20.0).unwrap();
        let high = video.moving_area(200.0).unwrap();
        assert!(low > 0 && high <= low);
    }
}
