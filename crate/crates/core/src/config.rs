//! Run configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::ModelConfig;

/// Where the discriminator's real shadow comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealShadowPolicy {
    /// The shadow region of the image the pseudo shadow was made from.
    SameImage,
    /// The shadow region of a random training image.
    #[default]
    AnyImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_base: f64,
    pub decay_start_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub init_std: f64,
    /// Accepted tolerance on the area ratio of sampled regions.
    pub alpha: f64,
    /// Dilation kernel size of the area loss.
    pub tau: usize,
    pub weights: LossWeights,
    pub detach_g_from_i: bool,
    pub detach_i_from_r: bool,
    pub seed: u64,
    /// Train the remover and refiner on real shadow / shadow-free pairs.
    pub supervised_mode: bool,
    pub real_shadow_policy: RealShadowPolicy,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_base: 2e-4,
            decay_start_epoch: 50,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            init_std: 0.02,
            alpha: 0.2,
            tau: 50,
            weights: LossWeights::default(),
            detach_g_from_i: false,
            detach_i_from_r: false,
            seed: 0,
            supervised_mode: false,
            real_shadow_policy: RealShadowPolicy::AnyImage,
            max_steps: None,
            keep_checkpoints: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Ground-truth masks from `<split>_B`.
    #[default]
    Gt,
    /// Masks from a separate directory, e.g. a detector's output.
    Provided,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `train_A`, `train_B`, ... (directly or under `train/`).
    pub root: Option<PathBuf>,
    /// Use only the first `limit` records of each split.
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Square resolution images are resized to for inference.
    pub test_size: u32,
    pub mask_source: MaskSource,
    /// Mask directory used when `mask_source = "provided"`.
    pub mask_dir: Option<PathBuf>,
    pub video_threshold: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_size: 256,
            mask_source: MaskSource::Gt,
            mask_dir: None,
            video_threshold: 80,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn positive(name: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive")))
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Override one value by dotted key, e.g. `train.seed=3` or `train.weights.gan=0`.
    /// The value is parsed as TOML, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_many(&[(key, value)])
    }

    /// Apply several overrides, validating only the final result so coupled
    /// values (such as load and crop size) can change together.
    pub fn set_many(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        let mut next = self.clone();
        for (key, value) in pairs {
            next.set_unchecked(key, value)?;
        }
        next.validate()?;
        *self = next;
        Ok(())
    }

    fn set_unchecked(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).expect("config serializes");
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_owned()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut doc;
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_owned(), parsed.clone());
                break;
            }
            node = table
                .entry((*part).to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let cfg: Config = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        positive("train.epochs", t.epochs > 0)?;
        positive("train.lr_base", t.lr_base > 0.0 && t.lr_base.is_finite())?;
        positive("train.batch_size", t.batch_size > 0)?;
        positive("train.init_std", t.init_std > 0.0 && t.init_std.is_finite())?;
        positive("train.keep_checkpoints", t.keep_checkpoints > 0)?;
        if t.decay_start_epoch > t.epochs {
            return Err(Error::Config(format!(
                "train.decay_start_epoch ({}) must not exceed train.epochs ({})",
                t.decay_start_epoch, t.epochs
            )));
        }
        for (name, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(t.alpha > 0.0 && t.alpha < 1.0) {
            return Err(Error::Config(format!("train.alpha must lie in (0, 1), got {}", t.alpha)));
        }
        t.weights.validate()?;
        let m = &self.model;
        positive("model.base_channels", m.base_channels > 0)?;
        positive("model.disc_channels", m.disc_channels > 0)?;
        self.augment.validate()?;
        for (name, size) in [("augment.crop_size", self.augment.crop_size), ("eval.test_size", self.eval.test_size)] {
            if size < 8 || size % 4 != 0 {
                return Err(Error::Config(format!(
                    "{name} must be a multiple of 4 and at least 8, got {size}"
                )));
            }
        }
        if self.eval.video_threshold == 0 || self.eval.video_threshold == 255 {
            return Err(Error::Config("eval.video_threshold must lie in 1..=254".into()));
        }
        if self.eval.mask_source == MaskSource::Provided && self.eval.mask_dir.is_none() {
            return Err(Error::Config("eval.mask_source = \"provided\" needs eval.mask_dir".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.weights.as_array(), [1.0, 5.0, 1.0, 1.0, 1.0]);
        assert_eq!((cfg.train.alpha, cfg.train.tau, cfg.train.epochs), (0.2, 50, 100));
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = Config::from_toml_str("[train]\nseed = 7\n[train.weights]\ngan = 0.0\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.weights.gan, 0.0);
        assert_eq!(cfg.train.weights.iden, 5.0);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_key_is_named_with_alternatives() {
        let err = Config::from_toml_str("[train]\nlearning_rate = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(err.contains("lr_base"), "{err}");
    }

    #[test]
    fn overrides_parse_values_and_validate() {
        let mut cfg = Config::default();
        cfg.set("train.seed", "11").unwrap();
        cfg.set("train.real_shadow_policy", "same_image").unwrap();
        cfg.set("data.root", "/tmp/istd").unwrap();
        cfg.set("train.max_steps", "200").unwrap();
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.train.real_shadow_policy, RealShadowPolicy::SameImage);
        assert_eq!(cfg.data.root.as_deref(), Some(Path::new("/tmp/istd")));
        assert_eq!(cfg.train.max_steps, Some(200));
        assert!(cfg.set("train.bogus", "1").unwrap_err().to_string().contains("bogus"));
        assert!(cfg.set("train.alpha", "1.5").is_err());
        assert!(cfg.set("train.decay_start_epoch", "500").is_err());
        assert_eq!(cfg.train.alpha, 0.2);
    }

    #[test]
    fn coupled_overrides_are_validated_together() {
        let mut cfg = Config::default();
        assert!(cfg.set("augment.load_size", "36").is_err());
        cfg.set_many(&[("augment.load_size", "36"), ("augment.crop_size", "32")]).unwrap();
        assert_eq!((cfg.augment.load_size, cfg.augment.crop_size), (36, 32));
        assert!(cfg.set_many(&[("augment.crop_size", "8"), ("train.nope", "1")]).is_err());
        assert_eq!(cfg.augment.crop_size, 32);
    }
}
