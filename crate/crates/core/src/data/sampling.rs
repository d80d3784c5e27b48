use rand::Rng;

use super::{mask_region, ImageNorm, ShadowMask};
use crate::error::{Error, Result};

/// Random pool draws before the pool is scanned in full.
pub const SAMPLE_RETRIES: usize = 50;

/// One weakly-supervised training sample built from a single shadow image.
#[derive(Clone, Debug)]
pub struct RegionPair {
    /// The image's own shadow region (zero outside `source_mask`).
    pub shadow_region: ImageNorm,
    /// A shadow-free region of the same image (zero outside `sample_mask`).
    pub nonshadow_region: ImageNorm,
    /// Sampled mask, already restricted to the image's shadow-free pixels.
    pub sample_mask: ShadowMask,
    pub source_image: ImageNorm,
    pub source_mask: ShadowMask,
    /// The area-ratio constraint was not enforced for this pair.
    pub fallback_used: bool,
}

impl RegionPair {
    /// Area(non-shadow region) / Area(shadow region).
    pub fn area_ratio(&self) -> f64 {
        self.sample_mask.area() as f64 / self.source_mask.area().max(1) as f64
    }
}

/// Distance of `ratio` from the open interval `(1 − α, 1 + α)`.
fn ratio_gap(ratio: f64, alpha: f64) -> f64 {
    ((1.0 - alpha) - ratio).max(ratio - (1.0 + alpha)).max(0.0)
}

/// Build a region pair: the shadow region under `shadow_mask`, and a region
/// cut from the shadow-free part of `image` by a mask drawn from `pool`.
///
/// A candidate is accepted when its area over the shadow area lies strictly
/// inside `(1 − α, 1 + α)`. When the shadow covers more than half the image the
/// constraint is dropped and any non-empty candidate is taken. After
/// [`SAMPLE_RETRIES`] random rejections the whole pool is scanned; only when no
/// mask in it fits is the candidate closest to the interval used.
/// Both relaxations set `fallback_used`.
pub fn sample_region_pair<R: Rng + ?Sized>(
    image: &ImageNorm,
    shadow_mask: &ShadowMask,
    pool: &[ShadowMask],
    alpha: f64,
    rng: &mut R,
) -> Result<RegionPair> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("mask pool is empty".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    shadow_mask.check_same_dims(image.dims())?;
    let lit = shadow_mask.complement();
    if lit.is_empty() {
        return Err(Error::NoShadowFreePixels);
    }
    let shadow_area = shadow_mask.area();
    let unconstrained = shadow_area * 2 > shadow_mask.len() || shadow_area == 0;

    let mut best: Option<(f64, ShadowMask)> = None;
    let mut chosen = None;
    for _ in 0..SAMPLE_RETRIES {
        let candidate = &pool[rng.gen_range(0..pool.len())];
        let candidate = candidate.resize_nearest(image.width(), image.height()).and(&lit)?;
        let area = candidate.area();
        if area == 0 {
            continue;
        }
        if unconstrained {
            chosen = Some((candidate, true));
            break;
        }
        let ratio = area as f64 / shadow_area as f64;
        let gap = ratio_gap(ratio, alpha);
        if gap == 0.0 && ratio > 1.0 - alpha && ratio < 1.0 + alpha {
            chosen = Some((candidate, false));
            break;
        }
        if best.as_ref().map_or(true, |(g, _)| gap < *g) {
            best = Some((gap, candidate));
        }
    }
    if chosen.is_none() && !unconstrained {
        // random draws missed; scan the whole pool from a random offset before relaxing
        let start = rng.gen_range(0..pool.len());
        for k in 0..pool.len() {
            let candidate = pool[(start + k) % pool.len()]
                .resize_nearest(image.width(), image.height())
                .and(&lit)?;
            let ratio = candidate.area() as f64 / shadow_area as f64;
            if ratio > 1.0 - alpha && ratio < 1.0 + alpha {
                chosen = Some((candidate, false));
                break;
            }
        }
    }
    let (sample_mask, fallback_used) = match (chosen, best) {
        (Some(c), _) => c,
        (None, Some((_, m))) => (m, true),
        (None, None) => (lit, true),
    };
    Ok(RegionPair {
        shadow_region: mask_region(image, shadow_mask)?,
        nonshadow_region: mask_region(image, &sample_mask)?,
        sample_mask,
        source_image: image.clone(),
        source_mask: shadow_mask.clone(),
        fallback_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::random_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> ShadowMask {
        ShadowMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn accepted_ratio_is_inside_tolerance() {
        // shadow 1000 px in a 100x100 image
        let shadow = rect(100, 100, 0, 0, 10, 100);
        let pool: Vec<_> = (1..40).map(|k| rect(100, 100, 50, 0, 50 + k, 100)).collect();
        let img = random_norm(100, 100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = sample_region_pair(&img, &shadow, &pool, 0.2, &mut rng).unwrap();
            assert!(!p.fallback_used);
            let a = p.sample_mask.area();
            assert!(a > 800 && a < 1200, "area {a}");
            assert!(p.sample_mask.and(&shadow).unwrap().is_empty());
        }
    }

    #[test]
    fn large_shadow_drops_the_constraint() {
        let shadow = rect(10, 10, 0, 0, 6, 10);
        let pool = vec![rect(10, 10, 6, 0, 7, 1)];
        let img = random_norm(10, 10, 2);
        let p = sample_region_pair(&img, &shadow, &pool, 0.2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.fallback_used);
        assert_eq!(p.sample_mask.area(), 1);
    }

    #[test]
    fn complement_sized_pool_mask_is_chosen() {
        let shadow = rect(8, 8, 0, 0, 4, 4);
        let lit_part = rect(8, 8, 4, 4, 8, 8);
        let img = random_norm(8, 8, 4);
        let p = sample_region_pair(&img, &shadow, &[lit_part.clone()], 0.2, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(p.sample_mask, lit_part);
        assert_eq!(p.area_ratio(), 1.0);
        assert!(!p.fallback_used);
    }

    #[test]
    fn exhausted_retries_fall_back_to_nearest_candidate() {
        let shadow = rect(20, 20, 0, 0, 5, 5);
        let pool = vec![rect(20, 20, 10, 10, 16, 16), rect(20, 20, 10, 10, 11, 11)];
        let img = random_norm(20, 20, 4);
        let p = sample_region_pair(&img, &shadow, &pool, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(p.fallback_used);
        // ratio 1.44 is closer to (0.8, 1.2) than 0.04 is
        assert_eq!(p.sample_mask.area(), 36);
    }

    #[test]
    fn a_rare_fitting_mask_is_found_after_random_misses() {
        let shadow = rect(20, 20, 0, 0, 5, 5);
        let mut pool = vec![rect(20, 20, 10, 10, 11, 11); 2000];
        pool.push(rect(20, 20, 10, 10, 15, 15));
        let img = random_norm(20, 20, 4);
        let p = sample_region_pair(&img, &shadow, &pool, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(!p.fallback_used);
        assert_eq!(p.sample_mask.area(), 25);
    }

    #[test]
    fn all_shadow_image_is_rejected() {
        let img = random_norm(4, 4, 0);
        let full = ShadowMask::full(4, 4);
        let err = sample_region_pair(&img, &full, &[full.clone()], 0.2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::NoShadowFreePixels)));
        assert!(sample_region_pair(&img, &ShadowMask::empty(4, 4), &[], 0.2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
