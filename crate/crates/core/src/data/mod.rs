//! Dataset access, region-pair construction, augmentation and mask utilities.

mod augment;
mod dataset;
pub(crate) mod mask;
mod sampling;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use dataset::{load_dataset, load_rgb, DatasetIndex, Record, Split};
pub use mask::{dilate_mask, ShadowMask};
pub use sampling::{sample_region_pair, RegionPair, SAMPLE_RETRIES};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::metrics::{rgb_to_lab, ImageLab};
use crate::tensor::Tensor;

const L_SCALE: f64 = 50.0;
const AB_SCALE: f64 = 128.0;

/// Network working space: LAB mapped affinely into [−1, 1] as a `[3, H, W]`
/// tensor (L/50 − 1, a/128, b/128). Zero is mid-gray.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageNorm {
    tensor: Tensor<f32>,
}

impl ImageNorm {
    pub fn from_lab(lab: &ImageLab) -> Self {
        let (w, h) = (lab.width() as usize, lab.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, p) in lab.pixels().iter().enumerate() {
            data[i] = (p[0] / L_SCALE - 1.0).clamp(-1.0, 1.0) as f32;
            data[plane + i] = (p[1] / AB_SCALE).clamp(-1.0, 1.0) as f32;
            data[2 * plane + i] = (p[2] / AB_SCALE).clamp(-1.0, 1.0) as f32;
        }
        Self {
            tensor: Tensor::from_vec(&[3, h, w], data),
        }
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        Self::from_lab(&rgb_to_lab(img))
    }

    /// Wrap a `[3, H, W]` tensor whose values lie in [−1, 1].
    pub fn from_tensor(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 3 {
            return Err(Error::Shape(format!("expected [3, H, W], got {:?}", tensor.shape())));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("normalized value {v} outside [-1, 1]")));
        }
        Ok(Self { tensor })
    }

    /// Wrap a `[3, H, W]` tensor, clamping into [−1, 1].
    pub fn from_tensor_clamped(tensor: Tensor<f32>) -> Result<Self> {
        Self::from_tensor(tensor.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            tensor: Tensor::zeros(&[3, height as usize, width as usize]),
        }
    }

    pub fn width(&self) -> u32 {
        self.tensor.shape()[2] as u32
    }

    pub fn height(&self) -> u32 {
        self.tensor.shape()[1] as u32
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width(), self.height())
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    /// Value at channel `c`, pixel `(x, y)`.
    pub fn at(&self, c: usize, x: u32, y: u32) -> f32 {
        let (w, h) = (self.width() as usize, self.height() as usize);
        self.tensor.data()[c * w * h + y as usize * w + x as usize]
    }

    pub fn to_lab(&self) -> ImageLab {
        let (w, h) = (self.width(), self.height());
        let plane = w as usize * h as usize;
        let d = self.tensor.data();
        let px = (0..plane)
            .map(|i| {
                [
                    ((f64::from(d[i]) + 1.0) * L_SCALE).clamp(0.0, 100.0),
                    f64::from(d[plane + i]) * AB_SCALE,
                    f64::from(d[2 * plane + i]) * AB_SCALE,
                ]
            })
            .collect();
        ImageLab::new(w, h, px).expect("lightness clamped into range")
    }

    /// Back to 8-bit sRGB, clipping out-of-gamut colours.
    pub fn to_rgb(&self) -> RgbImage {
        self.to_lab().to_rgb()
    }
}

/// Keep `img` where `mask` is on; every other value becomes exactly 0.
pub fn mask_region(img: &ImageNorm, mask: &ShadowMask) -> Result<ImageNorm> {
    mask.check_same_dims(img.dims())?;
    let plane = mask.len();
    let mut t = img.tensor.clone();
    for c in 0..3 {
        for (v, &m) in t.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(mask.values()) {
            if !m {
                *v = 0.0;
            }
        }
    }
    Ok(ImageNorm { tensor: t })
}

/// Splice a region estimate into the source image and append the mask:
/// channels 0–2 are `region` where `mask` is on and `source` elsewhere,
/// channel 3 is the mask. `region` must be zero outside the mask.
pub fn compose_embed(region: &ImageNorm, source: &ImageNorm, mask: &ShadowMask) -> Result<Tensor<f32>> {
    if region.dims() != source.dims() {
        return Err(Error::Shape(format!(
            "region {:?} vs source {:?}",
            region.dims(),
            source.dims()
        )));
    }
    mask.check_same_dims(source.dims())?;
    let plane = mask.len();
    let (h, w) = (source.height() as usize, source.width() as usize);
    let mut data = Vec::with_capacity(4 * plane);
    for c in 0..3 {
        let r = &region.tensor.data()[c * plane..(c + 1) * plane];
        let s = &source.tensor.data()[c * plane..(c + 1) * plane];
        for i in 0..plane {
            if mask.values()[i] {
                data.push(r[i]);
            } else if r[i] != 0.0 {
                return Err(Error::InvalidInput(
                    "region estimate is non-zero outside its mask".into(),
                ));
            } else {
                data.push(s[i]);
            }
        }
    }
    data.extend(mask.values().iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
    Ok(Tensor::from_vec(&[4, h, w], data))
}
