use rand::Rng;
use sha2::{Digest, Sha256};

use crate::config::{Config, RealShadowPolicy};
use crate::data::{
    load_rgb, mask_region, sample_region_pair, AugmentParams, DatasetIndex, ImageNorm, RegionPair, ShadowMask,
};
use crate::error::{Error, Result};

/// One training image with its shadow mask.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub name: String,
    pub image: ImageNorm,
    pub mask: ShadowMask,
    /// Only read in supervised mode.
    pub shadow_free: Option<ImageNorm>,
}

/// Random access to training items.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn item(&self, index: usize) -> Result<TrainItem>;

    fn mask(&self, index: usize) -> Result<ShadowMask> {
        Ok(self.item(index)?.mask)
    }

    /// Hex digest identifying the data, recorded in the run manifest.
    fn fingerprint(&self) -> Result<String>;
}

impl SampleSource for Vec<TrainItem> {
    fn len(&self) -> usize {
        <[TrainItem]>::len(self)
    }

    fn item(&self, index: usize) -> Result<TrainItem> {
        Ok(self[index].clone())
    }

    fn mask(&self, index: usize) -> Result<ShadowMask> {
        Ok(self[index].mask.clone())
    }

    fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for it in self {
            h.update(it.name.as_bytes());
            for v in it.image.tensor().data() {
                h.update(v.to_le_bytes());
            }
            h.update(it.mask.values().iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        Ok(hex(&h.finalize()))
    }
}

impl SampleSource for DatasetIndex {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn item(&self, index: usize) -> Result<TrainItem> {
        let r = &self.records[index];
        let image = ImageNorm::from_rgb(&load_rgb(&r.image)?);
        let mask = ShadowMask::load(&r.mask)?;
        let shadow_free = match &r.shadow_free {
            Some(p) => Some(ImageNorm::from_rgb(&load_rgb(p)?)),
            None => None,
        };
        Ok(TrainItem {
            name: r.stem.clone(),
            image,
            mask,
            shadow_free,
        })
    }

    fn mask(&self, index: usize) -> Result<ShadowMask> {
        ShadowMask::load(&self.records[index].mask)
    }

    /// Stems and file sizes; cheap enough to run on every training start.
    fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.stem.as_bytes());
            for p in [Some(&r.image), Some(&r.mask), r.shadow_free.as_ref()].into_iter().flatten() {
                h.update(std::fs::metadata(p)?.len().to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Every mask of the source, resized to `size`², as the pool sampled regions come from.
pub fn mask_pool(source: &dyn SampleSource, size: u32) -> Result<Vec<ShadowMask>> {
    (0..source.len())
        .map(|i| Ok(source.mask(i)?.resize_nearest(size, size)))
        .collect()
}

/// Everything one optimizer step consumes for one image.
#[derive(Clone, Debug)]
pub enum StepInput {
    Weak {
        pair: RegionPair,
        /// Shadow region shown to the discriminator as real.
        real_shadow: ImageNorm,
    },
    Supervised {
        image: ImageNorm,
        mask: ShadowMask,
        shadow_free: ImageNorm,
    },
}

fn augmented<R: Rng + ?Sized>(item: &TrainItem, cfg: &Config, rng: &mut R) -> Result<(ImageNorm, ShadowMask, Option<ImageNorm>)> {
    item.mask.check_same_dims(item.image.dims())?;
    let params = AugmentParams::sample(&cfg.augment, rng);
    let image = params.apply_image(&item.image, &cfg.augment);
    let mask = params.apply_mask(&item.mask, &cfg.augment);
    let free = item.shadow_free.as_ref().map(|f| params.apply_image(f, &cfg.augment));
    Ok((image, mask, free))
}

/// Load, augment and pair up the sample at `index`.
pub fn prepare_input<R: Rng + ?Sized>(
    source: &dyn SampleSource,
    index: usize,
    pool: &[ShadowMask],
    cfg: &Config,
    rng: &mut R,
) -> Result<StepInput> {
    let item = source.item(index)?;
    let (image, mask, free) = augmented(&item, cfg, rng)?;
    if cfg.train.supervised_mode {
        let shadow_free = free.ok_or_else(|| {
            Error::Dataset(format!("{}: supervised mode needs a shadow-free image", item.name))
        })?;
        return Ok(StepInput::Supervised {
            image,
            mask,
            shadow_free,
        });
    }
    let pair = sample_region_pair(&image, &mask, pool, cfg.train.alpha, rng)?;
    let real_shadow = match cfg.train.real_shadow_policy {
        RealShadowPolicy::SameImage => pair.shadow_region.clone(),
        RealShadowPolicy::AnyImage => {
            let other = source.item(rng.gen_range(0..source.len()))?;
            let (img, m, _) = augmented(&other, cfg, rng)?;
            mask_region(&img, &m)?
        }
    };
    Ok(StepInput::Weak { pair, real_shadow })
}
