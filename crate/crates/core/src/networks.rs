//! The four sub-networks: generator, remover and refiner share one residual
//! encoder/decoder backbone; the discriminator is a 70×70 patch classifier.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{conv_transpose_out, Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    Generator,
    Remover,
    Refiner,
    Discriminator,
}

impl NetRole {
    pub const ALL: [NetRole; 4] = [
        NetRole::Generator,
        NetRole::Remover,
        NetRole::Refiner,
        NetRole::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetRole::Generator => "generator",
            NetRole::Remover => "remover",
            NetRole::Refiner => "refiner",
            NetRole::Discriminator => "discriminator",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for NetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Width and depth of the networks. Defaults reproduce the reference architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels after the stem convolution; doubled by each downsampling stage.
    pub base_channels: usize,
    pub residual_blocks: usize,
    /// Channels of the first discriminator layer.
    pub disc_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            residual_blocks: 9,
            disc_channels: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    NormScale,
    Bias,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Arch {
    Backbone { base: usize, blocks: usize },
    Patch { base: usize, instance_norm: bool },
}

/// An instantiated sub-network and its trainable parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    role: NetRole,
    in_channels: usize,
    arch: Arch,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

struct ParamBuilder<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamBuilder<T> {
    fn add(&mut self, name: String, kind: ParamKind, shape: &[usize]) {
        let init = if kind == ParamKind::NormScale { T::one() } else { T::zero() };
        self.params.push(Param {
            name,
            kind,
            value: Tensor::full(shape, init),
        });
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.add(format!("{prefix}.weight"), ParamKind::ConvWeight, &[cout, cin, k, k]);
        if bias {
            self.add(format!("{prefix}.bias"), ParamKind::Bias, &[cout]);
        }
    }

    fn conv_t(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.add(format!("{prefix}.weight"), ParamKind::ConvWeight, &[cin, cout, k, k]);
        self.add(format!("{prefix}.bias"), ParamKind::Bias, &[cout]);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.weight"), ParamKind::NormScale, &[c]);
        self.add(format!("{prefix}.bias"), ParamKind::Bias, &[c]);
    }
}

/// Residual encoder/decoder: 7×7 stem, two stride-2 downsampling convolutions,
/// `residual_blocks` residual blocks, two stride-2 transposed convolutions and a
/// 7×7 tanh head. Instance normalization follows every convolution but the head.
pub fn build_backbone<T: Scalar>(role: NetRole, in_channels: usize, cfg: &ModelConfig) -> Result<Network<T>> {
    let expected = match role {
        NetRole::Generator | NetRole::Remover => 3,
        NetRole::Refiner => 4,
        NetRole::Discriminator => {
            return Err(Error::InvalidInput(
                "the discriminator is not a backbone network".into(),
            ))
        }
    };
    if in_channels != 3 && in_channels != 4 {
        return Err(Error::InvalidInput(format!(
            "backbone input channels must be 3 or 4, got {in_channels}"
        )));
    }
    if in_channels != expected {
        return Err(Error::InvalidInput(format!(
            "{role} takes {expected} input channels, got {in_channels}"
        )));
    }
    if cfg.base_channels == 0 {
        return Err(Error::InvalidInput("base_channels must be positive".into()));
    }
    let base = cfg.base_channels;
    let mut b = ParamBuilder { params: Vec::new() };
    b.conv("stem.conv", in_channels, base, 7, true);
    b.norm("stem.norm", base);
    b.conv("down0.conv", base, base * 2, 3, true);
    b.norm("down0.norm", base * 2);
    b.conv("down1.conv", base * 2, base * 4, 3, true);
    b.norm("down1.norm", base * 4);
    for r in 0..cfg.residual_blocks {
        for j in 0..2 {
            b.conv(&format!("res{r}.conv{j}"), base * 4, base * 4, 3, true);
            b.norm(&format!("res{r}.norm{j}"), base * 4);
        }
    }
    b.conv_t("up0.conv", base * 4, base * 2, 3);
    b.norm("up0.norm", base * 2);
    b.conv_t("up1.conv", base * 2, base, 3);
    b.norm("up1.norm", base);
    b.conv("head.conv", base, 3, 7, true);
    Ok(Network::new(
        role,
        in_channels,
        Arch::Backbone {
            base,
            blocks: cfg.residual_blocks,
        },
        b.params,
    ))
}

/// 70×70 patch discriminator: three stride-2 4×4 convolutions, a stride-1 one,
/// then a 1-channel 4×4 score layer. No normalization on the first layer.
pub fn build_discriminator<T: Scalar>(cfg: &ModelConfig) -> Network<T> {
    build_discriminator_with_norm(cfg, true)
}

/// Discriminator variant whose instance normalization can be switched off,
/// which makes each score depend only on its receptive field.
pub fn build_discriminator_with_norm<T: Scalar>(cfg: &ModelConfig, instance_norm: bool) -> Network<T> {
    let base = cfg.disc_channels.max(1);
    let mut b = ParamBuilder { params: Vec::new() };
    b.conv("layer0.conv", 3, base, 4, true);
    let widths = [base, base * 2, base * 4, base * 8];
    for i in 1..4 {
        b.conv(&format!("layer{i}.conv"), widths[i - 1], widths[i], 4, true);
        if instance_norm {
            b.norm(&format!("layer{i}.norm"), widths[i]);
        }
    }
    b.conv("score.conv", widths[3], 1, 4, true);
    Network::new(
        NetRole::Discriminator,
        3,
        Arch::Patch {
            base,
            instance_norm,
        },
        b.params,
    )
}

/// Discriminator score-map side length for a square input of side `size`.
pub fn discriminator_output_size(size: usize) -> Option<usize> {
    let mut s = size;
    for _ in 0..3 {
        s = (s + 2).checked_sub(4)? / 2 + 1;
    }
    for _ in 0..2 {
        s = (s + 2).checked_sub(4)? + 1;
        if s == 0 {
            return None;
        }
    }
    Some(s)
}

impl<T: Scalar> Network<T> {
    fn new(role: NetRole, in_channels: usize, arch: Arch, params: Vec<Param<T>>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self {
            role,
            in_channels,
            arch,
            params,
            index,
        }
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy parameters from a network of the same architecture family. Tensors
    /// whose input-channel extent differs (the refiner's 4-channel stem) are
    /// copied over their common leading channels.
    pub fn transplant_from(&mut self, other: &Network<T>) -> Result<()> {
        for p in &mut self.params {
            let Some(src) = other.param(&p.name) else {
                return Err(Error::Shape(format!("{} missing from source network", p.name)));
            };
            if src.value.shape() == p.value.shape() {
                p.value = src.value.clone();
                continue;
            }
            let (ds, ss) = (p.value.shape().to_vec(), src.value.shape().to_vec());
            if ds.len() != 4 || ds[0] != ss[0] || ds[2..] != ss[2..] {
                return Err(Error::Shape(format!(
                    "{}: cannot transplant {:?} into {:?}",
                    p.name, ss, ds
                )));
            }
            let plane = ds[2] * ds[3];
            let common = ds[1].min(ss[1]);
            for o in 0..ds[0] {
                for c in 0..common {
                    let d0 = (o * ds[1] + c) * plane;
                    let s0 = (o * ss[1] + c) * plane;
                    p.value.data_mut()[d0..d0 + plane]
                        .copy_from_slice(&src.value.data()[s0..s0 + plane]);
                }
            }
        }
        Ok(())
    }

    /// Record every parameter on `tape`; gradients are tracked when `trainable`.
    pub fn bind<'t, 'n>(&'n self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, 'n, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound { net: self, vars }
    }

    /// Check that an input of this spatial size is accepted.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "{} expects [{}, H, W] input, got {:?}",
                self.role, self.in_channels, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        match self.arch {
            Arch::Backbone { .. } => {
                if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
                    return Err(Error::Shape(format!(
                        "{} input must be at least 8x8 with sides divisible by 4, got {h}x{w}",
                        self.role
                    )));
                }
            }
            Arch::Patch { .. } => {
                if discriminator_output_size(h).is_none() || discriminator_output_size(w).is_none() {
                    return Err(Error::Shape(format!(
                        "discriminator input {h}x{w} is too small to produce a score map"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Convenience inference without gradient tracking.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(input.clone());
        let y = bound.forward(x)?;
        let out = (*y.value()).clone();
        Ok(out)
    }
}

/// A network whose parameters have been recorded on a tape.
pub struct Bound<'t, 'n, T> {
    net: &'n Network<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, '_, T> {
    pub fn network(&self) -> &Network<T> {
        self.net
    }

    /// Parameter variables in the same order as [`Network::params`].
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var<'t, T> {
        let i = self.net.index[name];
        self.vars[i]
    }

    fn norm(&self, x: Var<'t, T>, prefix: &str) -> Var<'t, T> {
        x.instance_norm(
            self.p(&format!("{prefix}.weight")),
            self.p(&format!("{prefix}.bias")),
            T::of(NORM_EPS),
        )
    }

    fn conv(&self, x: Var<'t, T>, prefix: &str, stride: usize, pad: usize) -> Var<'t, T> {
        let bias = self.net.index.get(&format!("{prefix}.bias")).map(|&i| self.vars[i]);
        x.conv2d(self.p(&format!("{prefix}.weight")), bias, stride, pad)
    }

    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.net.check_input(&x.shape())?;
        Ok(match self.net.arch {
            Arch::Backbone { blocks, .. } => self.backbone(x, blocks),
            Arch::Patch { instance_norm, .. } => self.patch(x, instance_norm),
        })
    }

    fn backbone(&self, x: Var<'t, T>, blocks: usize) -> Var<'t, T> {
        let mut h = self.conv(x.reflection_pad(3), "stem.conv", 1, 0);
        h = self.norm(h, "stem.norm").relu();
        for i in 0..2 {
            h = self.conv(h, &format!("down{i}.conv"), 2, 1);
            h = self.norm(h, &format!("down{i}.norm")).relu();
        }
        for r in 0..blocks {
            let mut y = self.conv(h.reflection_pad(1), &format!("res{r}.conv0"), 1, 0);
            y = self.norm(y, &format!("res{r}.norm0")).relu();
            y = self.conv(y.reflection_pad(1), &format!("res{r}.conv1"), 1, 0);
            y = self.norm(y, &format!("res{r}.norm1"));
            h = h.add(y);
        }
        for i in 0..2 {
            let prefix = format!("up{i}.conv");
            h = h.conv_transpose2d(
                self.p(&format!("{prefix}.weight")),
                Some(self.p(&format!("{prefix}.bias"))),
                2,
                1,
                1,
            );
            h = self.norm(h, &format!("up{i}.norm")).relu();
        }
        self.conv(h.reflection_pad(3), "head.conv", 1, 0).tanh()
    }

    fn patch(&self, x: Var<'t, T>, instance_norm: bool) -> Var<'t, T> {
        let slope = T::of(LEAKY_SLOPE);
        let mut h = self.conv(x, "layer0.conv", 2, 1).leaky_relu(slope);
        for i in 1..4 {
            let stride = if i < 3 { 2 } else { 1 };
            h = self.conv(h, &format!("layer{i}.conv"), stride, 1);
            if instance_norm {
                h = self.norm(h, &format!("layer{i}.norm"));
            }
            h = h.leaky_relu(slope);
        }
        self.conv(h, "score.conv", 1, 1)
    }
}

/// Pseudo shadow on the sampled region: the generator output re-masked by `mask`.
pub fn forward_generate<'t, T: Scalar>(
    generator: &Bound<'t, '_, T>,
    region: Var<'t, T>,
    mask: &Tensor<T>,
) -> Result<Var<'t, T>> {
    Ok(generator.forward(region)?.mul_mask(mask))
}

/// Shadow-free estimate of a region: the remover output re-masked by `mask`.
pub fn forward_remove<'t, T: Scalar>(
    remover: &Bound<'t, '_, T>,
    region: Var<'t, T>,
    mask: &Tensor<T>,
) -> Result<Var<'t, T>> {
    Ok(remover.forward(region)?.mul_mask(mask))
}

/// Refined full image from the 4-channel embedding.
pub fn forward_refine<'t, T: Scalar>(refiner: &Bound<'t, '_, T>, embedded: Var<'t, T>) -> Result<Var<'t, T>> {
    refiner.forward(embedded)
}

pub fn forward_discriminate<'t, T: Scalar>(
    discriminator: &Bound<'t, '_, T>,
    region: Var<'t, T>,
) -> Result<Var<'t, T>> {
    discriminator.forward(region)
}

/// Spatial size after the backbone's two transposed convolutions.
pub fn backbone_output_size(size: usize) -> usize {
    let down = (size + 2 - 3) / 2 + 1;
    let down = (down + 2 - 3) / 2 + 1;
    conv_transpose_out(conv_transpose_out(down, 3, 2, 1, 1), 3, 2, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::init_weights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            residual_blocks: 2,
            disc_channels: 4,
        }
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn initialized<T: Scalar>(mut net: Network<T>, seed: u64) -> Network<T> {
        init_weights(&mut net, 0.02, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        net
    }

    #[test]
    fn backbone_preserves_resolution() {
        let g = initialized(build_backbone::<f32>(NetRole::Generator, 3, &tiny()).unwrap(), 1);
        let out = g.infer(&noise(&[3, 40, 24], 2)).unwrap();
        assert_eq!(out.shape(), &[3, 40, 24]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let r = initialized(build_backbone::<f32>(NetRole::Refiner, 4, &tiny()).unwrap(), 1);
        assert_eq!(r.infer(&noise(&[4, 32, 32], 3)).unwrap().shape(), &[3, 32, 32]);
    }

    #[test]
    fn backbone_rejects_bad_channels_and_sizes() {
        assert!(build_backbone::<f32>(NetRole::Generator, 5, &tiny()).is_err());
        assert!(build_backbone::<f32>(NetRole::Refiner, 3, &tiny()).is_err());
        assert!(build_backbone::<f32>(NetRole::Discriminator, 3, &tiny()).is_err());
        let g = build_backbone::<f32>(NetRole::Remover, 3, &tiny()).unwrap();
        assert!(g.infer(&noise(&[3, 30, 32], 0)).is_err());
        assert!(g.infer(&noise(&[4, 32, 32], 0)).is_err());
    }

    #[test]
    fn full_size_parameter_counts() {
        let cfg = ModelConfig::default();
        let g = build_backbone::<f32>(NetRole::Generator, 3, &cfg).unwrap();
        let r = build_backbone::<f32>(NetRole::Refiner, 4, &cfg).unwrap();
        let d = build_discriminator::<f32>(&cfg);
        // frozen from the constructed models
        assert_eq!(g.param_count(), 11_388_675);
        assert_eq!(r.param_count(), 11_388_675 + 64 * 49);
        assert_eq!(d.param_count(), 2_766_529);
    }

    #[test]
    fn discriminator_score_map_size() {
        assert_eq!(discriminator_output_size(256), Some(30));
        assert_eq!(discriminator_output_size(128), Some(14));
        assert_eq!(discriminator_output_size(16), None);
        let d = initialized(build_discriminator::<f32>(&tiny()), 4);
        let s = d.infer(&noise(&[3, 64, 48], 5)).unwrap();
        assert_eq!(s.shape(), &[1, 6, 4]);
        assert!(s.is_finite());
    }

    #[test]
    fn zero_parameters_give_constant_scores() {
        let d = build_discriminator::<f32>(&tiny());
        let mut d = d;
        for p in d.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let s = d.infer(&noise(&[3, 48, 48], 9)).unwrap();
        assert!(s.data().iter().all(|&v| v == s.data()[0]));
    }

    #[test]
    fn transplant_between_backbones() {
        let g = initialized(build_backbone::<f32>(NetRole::Generator, 3, &tiny()).unwrap(), 11);
        let mut i = build_backbone::<f32>(NetRole::Remover, 3, &tiny()).unwrap();
        i.transplant_from(&g).unwrap();
        let x = noise(&[3, 16, 16], 1);
        assert_eq!(g.infer(&x).unwrap(), i.infer(&x).unwrap());

        let mut r = build_backbone::<f32>(NetRole::Refiner, 4, &tiny()).unwrap();
        r.transplant_from(&g).unwrap();
        let stem = r.param("stem.conv.weight").unwrap().value.clone();
        let src = &g.param("stem.conv.weight").unwrap().value;
        assert_eq!(&stem.data()[..3 * 49], &src.data()[..3 * 49]);
        assert!(stem.data()[3 * 49..4 * 49].iter().all(|&v| v == 0.0));

        let mut back = build_backbone::<f32>(NetRole::Generator, 3, &tiny()).unwrap();
        back.transplant_from(&r).unwrap();
        assert_eq!(back.infer(&x).unwrap(), g.infer(&x).unwrap());
    }
}
