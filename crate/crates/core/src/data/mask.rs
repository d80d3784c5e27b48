use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Binary per-pixel mask; `true` marks the region of interest.
#[derive(Clone, PartialEq, Eq)]
pub struct ShadowMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl std::fmt::Debug for ShadowMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ShadowMask({}x{}, area {})", self.width, self.height, self.area())
    }
}

impl ShadowMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self::filled(width, height, false)
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::filled(width, height, true)
    }

    fn filled(width: u32, height: u32, v: bool) -> Self {
        Self {
            width,
            height,
            data: vec![v; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{} mask values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Binarize an 8-bit mask image at half range (> 127 is on).
    pub fn from_luma(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] > 127).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_luma(&img.to_luma8()))
    }

    pub fn to_luma(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    /// Number of on-pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| !v).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_same_dims(other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a || b)
    }

    /// Pixels on in `self` and off in `other`.
    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && !b)
    }

    /// Every on-pixel of `self` is on in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn check_same_dims(&self, (w, h): (u32, u32)) -> Result<()> {
        if (self.width, self.height) != (w, h) {
            return Err(Error::Shape(format!(
                "mask is {}x{} but image is {w}x{h}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// `[1, H, W]` tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height as usize, self.width as usize],
            self.data.iter().map(|&v| if v { T::one() } else { T::zero() }).collect(),
        )
    }

    pub fn resize_nearest(&self, width: u32, height: u32) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        Self::from_fn(width, height, |x, y| {
            // sample at pixel centres
            let sx = (((2 * x as u64 + 1) * self.width as u64) / (2 * width as u64)) as u32;
            let sy = (((2 * y as u64 + 1) * self.height as u64) / (2 * height as u64)) as u32;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    pub fn crop(&self, x0: u32, y0: u32, width: u32, height: u32) -> Self {
        Self::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }
}

/// Binary dilation by a `tau`×`tau` square structuring element anchored at
/// `tau / 2`, so each output pixel covers input offsets `-tau/2 ..= tau - 1 - tau/2`.
/// `tau` of 0 or 1 returns the mask unchanged.
pub fn dilate_mask(mask: &ShadowMask, tau: usize) -> ShadowMask {
    if tau <= 1 {
        return mask.clone();
    }
    let lo = (tau / 2) as isize;
    let hi = (tau - 1 - tau / 2) as isize;
    let (w, h) = (mask.width as usize, mask.height as usize);
    let rows = max_filter_1d(&mask.data, w, h, lo, hi, true);
    let data = max_filter_1d(&rows, w, h, lo, hi, false);
    ShadowMask {
        width: mask.width,
        height: mask.height,
        data,
    }
}

/// Sliding-window OR along rows (`horizontal`) or columns via prefix counts.
fn max_filter_1d(src: &[bool], w: usize, h: usize, lo: isize, hi: isize, horizontal: bool) -> Vec<bool> {
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let mut out = vec![false; w * h];
    let mut prefix = vec![0u32; len + 1];
    for line in 0..lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + u32::from(src[at(line, i)]);
        }
        for i in 0..len {
            let a = (i as isize - lo).max(0) as usize;
            let b = ((i as isize + hi).min(len as isize - 1) + 1) as usize;
            out[at(line, i)] = prefix[b] > prefix[a];
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force dilation: scan the full window for every pixel.
    pub(crate) fn dilate_oracle(mask: &ShadowMask, tau: usize) -> ShadowMask {
        if tau <= 1 {
            return mask.clone();
        }
        let lo = (tau / 2) as i64;
        let hi = (tau - 1 - tau / 2) as i64;
        let (w, h) = (mask.width() as i64, mask.height() as i64);
        ShadowMask::from_fn(mask.width(), mask.height(), |x, y| {
            for dy in -lo..=hi {
                for dx in -lo..=hi {
                    let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                    if sx >= 0 && sy >= 0 && sx < w && sy < h && mask.get(sx as u32, sy as u32) {
                        return true;
                    }
                }
            }
            false
        })
    }

    pub(crate) fn random_mask(w: u32, h: u32, density: f64, seed: u64) -> ShadowMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rng.gen_bool(density)).collect();
        ShadowMask::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn zero_and_one_kernels_are_identity() {
        let m = random_mask(9, 7, 0.3, 1);
        assert_eq!(dilate_mask(&m, 0), m);
        assert_eq!(dilate_mask(&m, 1), m);
    }

    #[test]
    fn single_pixel_grows_into_clipped_block() {
        let mut m = ShadowMask::empty(6, 5);
        m.set(2, 2, true);
        let d = dilate_mask(&m, 3);
        assert_eq!(d.area(), 9);
        for y in 1..=3 {
            for x in 1..=3 {
                assert!(d.get(x, y));
            }
        }
        let mut corner = ShadowMask::empty(6, 5);
        corner.set(0, 0, true);
        assert_eq!(dilate_mask(&corner, 3).area(), 4);
    }

    #[test]
    fn large_kernel_matches_brute_force() {
        let m = random_mask(70, 60, 0.002, 7);
        assert_eq!(dilate_mask(&m, 50), dilate_oracle(&m, 50));
        let m = random_mask(31, 17, 0.05, 8);
        for tau in [2, 4, 5, 15] {
            assert_eq!(dilate_mask(&m, tau), dilate_oracle(&m, tau), "tau {tau}");
        }
    }

    #[test]
    fn luma_binarizes_at_half_range() {
        let img = GrayImage::from_raw(3, 1, vec![127, 128, 255]).unwrap();
        assert_eq!(ShadowMask::from_luma(&img).values(), &[false, true, true]);
    }

    proptest! {
        #[test]
        fn dilation_is_extensive_and_monotone(seed in 0u64..1000, tau in 1usize..8) {
            let small = random_mask(12, 10, 0.1, seed);
            let big = small.or(&random_mask(12, 10, 0.1, seed + 1)).unwrap();
            let ds = dilate_mask(&small, tau);
            prop_assert!(small.is_subset_of(&ds));
            prop_assert!(ds.is_subset_of(&dilate_mask(&big, tau)));
        }
    }
}
