//! sRGB (D65) ⇄ CIE L*a*b* conversion.

use image::RgbImage;

use crate::error::{Error, Result};

const KAPPA: f64 = 24389.0 / 27.0;
const EPSILON: f64 = 216.0 / 24389.0;
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// Three-channel L*a*b* image, pixel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageLab {
    width: u32,
    height: u32,
    data: Vec<[f64; 3]>,
}

impl ImageLab {
    pub fn new(width: u32, height: u32, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{} LAB pixels for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(p) = data.iter().find(|p| !(0.0..=100.0).contains(&p[0])) {
            return Err(Error::InvalidInput(format!("L channel out of [0, 100]: {}", p[0])));
        }
        Ok(Self { width, height, data })
    }

    /// Convert raw interleaved 8-bit samples; only 3-channel input is accepted.
    pub fn from_rgb_bytes(width: u32, height: u32, channels: usize, bytes: &[u8]) -> Result<Self> {
        if channels != 3 {
            return Err(Error::InvalidInput(format!(
                "expected a 3-channel RGB image, got {channels} channel(s)"
            )));
        }
        if bytes.len() != width as usize * height as usize * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|p| rgb_pixel_to_lab([p[0], p[1], p[2]]))
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    pub fn to_rgb(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for (dst, lab) in out.pixels_mut().zip(&self.data) {
            dst.0 = lab_pixel_to_rgb(*lab);
        }
        out
    }
}

pub fn rgb_to_lab(img: &RgbImage) -> ImageLab {
    ImageLab {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| rgb_pixel_to_lab(p.0)).collect(),
    }
}

pub fn lab_to_rgb(img: &ImageLab) -> RgbImage {
    img.to_rgb()
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

pub fn rgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(f64::from(c) / 255.0));
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let v = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(v / WHITE[i]);
    }
    let l = (116.0 * f[1] - 16.0).clamp(0.0, 100.0);
    [l, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Inverse conversion, clipped to the 8-bit sRGB gamut.
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let mut out = [0u8; 3];
    for (o, row) in out.iter_mut().zip(XYZ_TO_RGB.iter()) {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        *o = (linear_to_srgb(lin.clamp(0.0, 1.0)) * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_and_black() {
        let w = rgb_pixel_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-4);
        assert!(w[1].abs() < 1e-3 && w[2].abs() < 1e-3);
        assert_eq!(rgb_pixel_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_gray_matches_textbook_formula() {
        // Neutral gray: X/Xn = Y = Z/Zn = linear value, so a = b = 0 and
        // L = 116·Y^(1/3) − 16 with the classic CIE piecewise constants.
        let c: f64 = 119.0 / 255.0;
        let y = ((c + 0.055) / 1.055).powf(2.4);
        let l_ref = if y > 0.008856 { 116.0 * y.cbrt() - 16.0 } else { 903.3 * y };
        let lab = rgb_pixel_to_lab([119, 119, 119]);
        assert!((lab[0] - l_ref).abs() < 1e-3, "{} vs {l_ref}", lab[0]);
        assert!((lab[0] - 50.0).abs() < 0.5);
        assert!(lab[1].abs() < 1e-3 && lab[2].abs() < 1e-3);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(ImageLab::from_rgb_bytes(1, 1, 4, &[1, 2, 3, 4]).is_err());
        assert!(ImageLab::from_rgb_bytes(1, 1, 1, &[1]).is_err());
        assert!(ImageLab::from_rgb_bytes(1, 1, 3, &[1, 2, 3]).is_ok());
    }

    #[test]
    fn round_trip_on_a_dense_grid() {
        for r in (0..=255).step_by(5) {
            for g in (0..=255).step_by(5) {
                for b in (0..=255).step_by(5) {
                    let rgb = [r as u8, g as u8, b as u8];
                    let back = lab_pixel_to_rgb(rgb_pixel_to_lab(rgb));
                    for k in 0..3 {
                        assert!((back[k] as i32 - rgb[k] as i32).abs() <= 1, "{rgb:?} -> {back:?}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_one_level(r: u8, g: u8, b: u8) {
            let back = lab_pixel_to_rgb(rgb_pixel_to_lab([r, g, b]));
            prop_assert!((back[0] as i32 - r as i32).abs() <= 1);
            prop_assert!((back[1] as i32 - g as i32).abs() <= 1);
            prop_assert!((back[2] as i32 - b as i32).abs() <= 1);
        }

        #[test]
        fn lightness_stays_in_range(r: u8, g: u8, b: u8) {
            let lab = rgb_pixel_to_lab([r, g, b]);
            prop_assert!((0.0..=100.0).contains(&lab[0]));
            prop_assert!(lab[1].abs() < 128.0 && lab[2].abs() < 128.0);
        }
    }
}
