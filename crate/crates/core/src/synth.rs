//! Synthetic shadow composites: a smooth textured scene, an elliptical shadow
//! region darkened with a cool tint, the binary mask and the shadow-free scene.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageNorm, ShadowMask};
use crate::error::{Error, Result};
use crate::trainer::TrainItem;

#[derive(Clone, Debug)]
pub struct Composite {
    pub shadow: RgbImage,
    pub mask: ShadowMask,
    pub shadow_free: RgbImage,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// One composite of `size`×`size` pixels, fully determined by `seed`.
pub fn composite(size: u32, seed: u64) -> Composite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = f64::from(size);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(110.0..230.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(110.0..230.0));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(0.08..0.25) * s,
                std::array::from_fn(|_| rng.gen_range(-40.0..40.0)),
            )
        })
        .collect();
    let free = RgbImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (f64::from(x), f64::from(y));
        let t = (((fx - s / 2.0) * dx + (fy - s / 2.0) * dy) / s + 0.5).clamp(0.0, 1.0);
        let mut px: [f64; 3] = std::array::from_fn(|c| lerp(c0[c], c1[c], t));
        for (bx, by, r, tint) in &blobs {
            let d2 = ((fx - bx).powi(2) + (fy - by).powi(2)) / (r * r);
            let w = (-d2).exp();
            for c in 0..3 {
                px[c] += w * tint[c];
            }
        }
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });

    // ellipse covering roughly 8–35% of the frame
    let (cx, cy) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
    let (ax, ay) = (rng.gen_range(0.18..0.36) * s, rng.gen_range(0.15..0.3) * s);
    let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (cr, sr) = (rot.cos(), rot.sin());
    let mask = ShadowMask::from_fn(size, size, |x, y| {
        let (px, py) = (f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy);
        let (u, v) = (px * cr + py * sr, -px * sr + py * cr);
        (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
    });
    let k = rng.gen_range(0.35..0.55);
    let tint = [0.92, 0.98, 1.1];
    let mut shadow = free.clone();
    for (x, y, p) in shadow.enumerate_pixels_mut() {
        if mask.get(x, y) {
            *p = Rgb(std::array::from_fn(|c| (f64::from(p.0[c]) * k * tint[c]).round().clamp(0.0, 255.0) as u8));
        }
    }
    Composite {
        shadow,
        mask,
        shadow_free: free,
    }
}

/// `count` composites as training items named `synth_0000`, ...
pub fn items(count: usize, size: u32, seed: u64) -> Vec<TrainItem> {
    (0..count)
        .map(|i| {
            let c = composite(size, seed.wrapping_add(i as u64));
            TrainItem {
                name: format!("synth_{i:04}"),
                image: ImageNorm::from_rgb(&c.shadow),
                mask: c.mask,
                shadow_free: Some(ImageNorm::from_rgb(&c.shadow_free)),
            }
        })
        .collect()
}

/// Write composites in the `<split>/<split>_{A,B,C}` layout.
pub fn write_dataset(root: &Path, split: &str, count: usize, size: u32, seed: u64) -> Result<()> {
    let dirs = ['A', 'B', 'C'].map(|s| root.join(split).join(format!("{split}_{s}")));
    for d in &dirs {
        std::fs::create_dir_all(d)?;
    }
    let save_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Image { path, source }
    };
    for i in 0..count {
        let c = composite(size, seed.wrapping_add(i as u64));
        let name = format!("synth_{i:04}.png");
        let (a, b, cpath) = (dirs[0].join(&name), dirs[1].join(&name), dirs[2].join(&name));
        c.shadow.save(&a).map_err(save_err(&a))?;
        let m = GrayImage::from_fn(size, size, |x, y| Luma([if c.mask.get(x, y) { 255 } else { 0 }]));
        m.save(&b).map_err(save_err(&b))?;
        c.shadow_free.save(&cpath).map_err(save_err(&cpath))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composites_are_deterministic_and_darkened_inside_the_mask() {
        let a = composite(64, 5);
        let b = composite(64, 5);
        assert_eq!(a.shadow, b.shadow);
        assert_eq!(a.mask, b.mask);
        let frac = a.mask.area() as f64 / 4096.0;
        assert!(frac > 0.03 && frac < 0.5, "{frac}");
        for (x, y, p) in a.shadow.enumerate_pixels() {
            let f = a.shadow_free.get_pixel(x, y);
            if a.mask.get(x, y) {
                assert!(p.0[0] < f.0[0]);
            } else {
                assert_eq!(p, f);
            }
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "train", 3, 32, 1).unwrap();
        let idx = crate::data::load_dataset(dir.path(), crate::data::Split::Train).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.records.iter().all(|r| r.shadow_free.is_some()));
    }
}
