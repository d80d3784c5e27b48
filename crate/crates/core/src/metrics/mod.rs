//! Colour conversion and the evaluation metrics.
//!
//! The error the shadow-removal literature reports as "RMSE" is the per-image
//! mean absolute L*a*b* difference over a region ([`lab_mae_region`]); the
//! actual root-mean-square error is available as [`true_rmse_region`].
//! PSNR and SSIM are computed on 8-bit RGB.

mod color;
mod report;
mod video;

pub use color::{lab_pixel_to_rgb, lab_to_rgb, rgb_pixel_to_lab, rgb_to_lab, ImageLab};
pub use report::{ImageMetrics, MetricsReport, RegionErrorSums};
pub use video::{grayscale_bt601, moving_shadow_mask, vmax, MovingShadow};

use image::RgbImage;

use crate::data::ShadowMask;
use crate::error::{Error, Result};

/// PSNR reported for identical images (and the ceiling for near-identical ones).
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

fn check_lab_inputs(pred: &ImageLab, gt: &ImageLab, mask: &ShadowMask) -> Result<()> {
    let dims = (pred.width(), pred.height());
    if dims != (gt.width(), gt.height()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            dims.0,
            dims.1,
            gt.width(),
            gt.height()
        )));
    }
    mask.check_same_dims(dims)
}

/// Sum of channel-mean absolute LAB differences and the pixel count over `mask`.
pub fn lab_abs_error_sum(pred: &ImageLab, gt: &ImageLab, mask: &ShadowMask) -> Result<(f64, usize)> {
    check_lab_inputs(pred, gt, mask)?;
    let mut sum = 0.0;
    let mut count = 0;
    for ((p, g), &m) in pred.pixels().iter().zip(gt.pixels()).zip(mask.values()) {
        if m {
            sum += ((p[0] - g[0]).abs() + (p[1] - g[1]).abs() + (p[2] - g[2]).abs()) / 3.0;
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean absolute LAB error over the masked pixels (the literature's "RMSE").
pub fn lab_mae_region(pred: &ImageLab, gt: &ImageLab, mask: &ShadowMask) -> Result<f64> {
    let (sum, count) = lab_abs_error_sum(pred, gt, mask)?;
    if count == 0 {
        return Err(Error::EmptyRegion("LAB error over an empty mask"));
    }
    Ok(sum / count as f64)
}

/// Root of the mean squared LAB difference over masked pixels and channels.
pub fn true_rmse_region(pred: &ImageLab, gt: &ImageLab, mask: &ShadowMask) -> Result<f64> {
    check_lab_inputs(pred, gt, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, g), &m) in pred.pixels().iter().zip(gt.pixels()).zip(mask.values()) {
        if m {
            sum += (0..3).map(|k| (p[k] - g[k]).powi(2)).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion("LAB error over an empty mask"));
    }
    Ok((sum / (3 * count) as f64).sqrt())
}

fn check_rgb_pair(pred: &RgbImage, gt: &RgbImage) -> Result<()> {
    if pred.dimensions() != gt.dimensions() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dimensions(),
            gt.dimensions()
        )));
    }
    Ok(())
}

/// 10·log10(255²/MSE) over all pixels and channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_rgb_pair(pred, gt)?;
    let n = pred.as_raw().len();
    if n == 0 {
        return Err(Error::InvalidInput("PSNR of an empty image".into()));
    }
    let sse: f64 = pred
        .as_raw()
        .iter()
        .zip(gt.as_raw())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse / n as f64;
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable "valid" filtering of a `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (wo, ho) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; wo * h];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, taps);
    let my = filter_valid(y, w, h, taps);
    let sxx = filter_valid(&xx, w, h, taps);
    let syy = filter_valid(&yy, w, h, taps);
    let sxy = filter_valid(&xy, w, h, taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03, L = 255)
/// over valid window positions, averaged across the RGB channels.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_rgb_pair(pred, gt)?;
    let (w, h) = (pred.width() as usize, pred.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = pred.pixels().map(|p| f64::from(p.0[c])).collect();
        let y: Vec<f64> = gt.pixels().map(|p| f64::from(p.0[c])).collect();
        total += ssim_plane(&x, &y, w, h, &taps);
    }
    Ok(total / 3.0)
}

/// Zero every pixel outside `mask`.
pub fn mask_rgb(img: &RgbImage, mask: &ShadowMask) -> Result<RgbImage> {
    mask.check_same_dims(img.dimensions())?;
    let mut out = img.clone();
    for (p, &m) in out.pixels_mut().zip(mask.values()) {
        if !m {
            p.0 = [0, 0, 0];
        }
    }
    Ok(out)
}

/// PSNR of both images with everything outside `mask` zeroed.
pub fn psnr_region(pred: &RgbImage, gt: &RgbImage, mask: &ShadowMask) -> Result<f64> {
    psnr(&mask_rgb(pred, mask)?, &mask_rgb(gt, mask)?)
}

/// SSIM of both images with everything outside `mask` zeroed.
pub fn ssim_region(pred: &RgbImage, gt: &RgbImage, mask: &ShadowMask) -> Result<f64> {
    ssim(&mask_rgb(pred, mask)?, &mask_rgb(gt, mask)?)
}

/// Shadow, non-shadow and whole-image metrics of one prediction.
///
/// Regions are defined by `shadow`; a region with no pixels gets no value.
pub fn evaluate_image(name: &str, pred: &RgbImage, gt: &RgbImage, shadow: &ShadowMask) -> Result<ImageMetrics> {
    check_rgb_pair(pred, gt)?;
    shadow.check_same_dims(pred.dimensions())?;
    let (pl, gl) = (rgb_to_lab(pred), rgb_to_lab(gt));
    let regions = [
        shadow.clone(),
        shadow.complement(),
        ShadowMask::full(shadow.width(), shadow.height()),
    ];
    let mut out = ImageMetrics::named(name);
    for (i, region) in regions.iter().enumerate() {
        let (sum, count) = lab_abs_error_sum(&pl, &gl, region)?;
        out.sums.set(i, sum, count);
        if count == 0 {
            continue;
        }
        let mae = Some(sum / count as f64);
        let p = Some(psnr_region(pred, gt, region)?);
        let s = Some(ssim_region(pred, gt, region)?);
        match i {
            0 => (out.rmse_shadow, out.psnr_shadow, out.ssim_shadow) = (mae, p, s),
            1 => (out.rmse_nonshadow, out.psnr_nonshadow, out.ssim_nonshadow) = (mae, p, s),
            _ => (out.rmse_all, out.psnr_all, out.ssim_all) = (mae, p, s),
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::mask::tests::random_mask;
    use image::Rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rgb(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    fn lab_from(px: Vec<[f64; 3]>, w: u32) -> ImageLab {
        let h = px.len() as u32 / w;
        ImageLab::new(w, h, px).unwrap()
    }

    /// Direct 2-D window SSIM used to check the separable implementation.
    pub(crate) fn ssim_oracle(a: &RgbImage, b: &RgbImage) -> f64 {
        let (w, h) = (a.width() as usize, a.height() as usize);
        let g = gaussian_taps(11, 1.5);
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let mut per_channel = 0.0;
        for c in 0..3 {
            let px = |img: &RgbImage, x: usize, y: usize| f64::from(img.get_pixel(x as u32, y as u32).0[c]);
            let mut acc = 0.0;
            let mut n = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            let (u, v) = (px(a, x0 + j, y0 + i), px(b, x0 + j, y0 + i));
                            mx += wt * u;
                            my += wt * v;
                            sxx += wt * u * u;
                            syy += wt * v * v;
                            sxy += wt * u * v;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            per_channel += acc / n as f64;
        }
        per_channel / 3.0
    }

    #[test]
    fn lab_errors_on_closed_forms() {
        let zero = lab_from(vec![[50.0, 0.0, 0.0]; 4], 2);
        let mask = ShadowMask::full(2, 2);
        assert_eq!(lab_mae_region(&zero, &zero, &mask).unwrap(), 0.0);
        assert_eq!(true_rmse_region(&zero, &zero, &mask).unwrap(), 0.0);

        let mut one = ShadowMask::empty(2, 2);
        one.set(1, 0, true);
        let shifted = lab_from(
            vec![[99.0, 9.0, 9.0], [53.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]],
            2,
        );
        assert_eq!(lab_mae_region(&shifted, &zero, &one).unwrap(), 1.0);
        let shifted = lab_from(
            vec![[50.0, 0.0, 0.0], [53.0, 4.0, 0.0], [50.0, 0.0, 0.0], [50.0, 0.0, 0.0]],
            2,
        );
        let rmse = true_rmse_region(&shifted, &zero, &one).unwrap();
        assert!((rmse - (25.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_region_is_an_error() {
        let img = lab_from(vec![[50.0, 0.0, 0.0]; 4], 2);
        let empty = ShadowMask::empty(2, 2);
        assert!(matches!(lab_mae_region(&img, &img, &empty), Err(Error::EmptyRegion(_))));
        assert!(matches!(true_rmse_region(&img, &img, &empty), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn psnr_cap_and_uniform_offset() {
        let a = RgbImage::from_pixel(8, 8, Rgb([100, 100, 100]));
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = RgbImage::from_pixel(8, 8, Rgb([116, 116, 116]));
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 24.0484).abs() < 1e-3);
        assert!(psnr(&a, &RgbImage::new(4, 4)).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = random_rgb(16, 16, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        // constant images: zero variance, SSIM reduces to the luminance term
        let (u, v) = (40.0f64, 200.0f64);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expected = (2.0 * u * v + c1) / (u * u + v * v + c1);
        let x = RgbImage::from_pixel(12, 12, Rgb([40; 3]));
        let y = RgbImage::from_pixel(12, 12, Rgb([200; 3]));
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&RgbImage::new(10, 30), &RgbImage::new(10, 30)).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sums() {
        let a = random_rgb(16, 14, 1);
        let b = random_rgb(16, 14, 2);
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_oracle(&a, &b);
        assert!((fast - slow).abs() <= 1e-5 * slow.abs().max(1e-12));
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn evaluate_image_regions() {
        let gt = random_rgb(16, 16, 5);
        let shadow = random_mask(16, 16, 0.4, 6);
        let m = evaluate_image("x", &gt, &gt, &shadow).unwrap();
        assert_eq!(m.rmse_shadow, Some(0.0));
        assert_eq!(m.rmse_all, Some(0.0));
        assert_eq!(m.ssim_all, Some(1.0));
        assert_eq!(m.psnr_nonshadow, Some(PSNR_CAP_DB));

        let full = ShadowMask::full(16, 16);
        let m = evaluate_image("y", &random_rgb(16, 16, 7), &gt, &full).unwrap();
        assert!(m.rmse_nonshadow.is_none());
        assert_eq!(m.rmse_shadow, m.rmse_all);
    }
}
