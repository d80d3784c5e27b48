//! Joint optimization of the generator, remover and refiner against the
//! patch discriminator.

mod checkpoint;
mod optim;
mod source;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{lr_at, Adam};
pub use source::{mask_pool, prepare_input, SampleSource, StepInput, TrainItem};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{Config, TrainConfig};
use crate::data::{mask_region, ImageNorm, ShadowMask};
use crate::error::{Error, Result};
use crate::losses::{
    loss_area, loss_dis, loss_full, loss_gen, loss_identity, loss_removal, total_loss, weighted_sum, LossBreakdown,
    LossTerms,
};
use crate::networks::{
    build_backbone, build_discriminator, forward_discriminate, forward_generate, forward_refine, forward_remove,
    Bound, ModelConfig, NetRole, Network, ParamKind,
};
use crate::tensor::{Scalar, Tensor};

/// Convolution weights ~ N(0, std²), normalization scales ~ N(1, std²), biases 0.
pub fn init_weights<T: Scalar, R: Rng + ?Sized>(net: &mut Network<T>, std: f64, rng: &mut R) -> Result<()> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidInput(format!("init std must be positive, got {std}")));
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    for p in net.params_mut() {
        let (offset, random) = match p.kind {
            ParamKind::ConvWeight => (0.0, true),
            ParamKind::NormScale => (1.0, true),
            ParamKind::Bias => (0.0, false),
        };
        for v in p.value.data_mut() {
            *v = if random { T::of(offset + normal.sample(rng)) } else { T::zero() };
        }
    }
    Ok(())
}

/// Counter-based RNG: the same `(seed, domain, index)` always yields the same stream,
/// which makes resumed runs replay the draws of an uninterrupted one.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const DOMAIN_INIT: u64 = 1;
const DOMAIN_SHUFFLE: u64 = 2;
const DOMAIN_STEP: u64 = 3;

/// Visiting order of `n` records in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, DOMAIN_SHUFFLE, epoch as u64));
    order
}

#[derive(Clone, Debug)]
pub struct Networks {
    pub generator: Network<f32>,
    pub remover: Network<f32>,
    pub refiner: Network<f32>,
    pub discriminator: Network<f32>,
}

impl Networks {
    /// Networks with the fixed starting values of the builders (unit norm scales, zero elsewhere).
    pub fn new(model: &ModelConfig) -> Result<Self> {
        Ok(Self {
            generator: build_backbone(NetRole::Generator, 3, model)?,
            remover: build_backbone(NetRole::Remover, 3, model)?,
            refiner: build_backbone(NetRole::Refiner, 4, model)?,
            discriminator: build_discriminator(model),
        })
    }

    pub fn initialized(model: &ModelConfig, std: f64, seed: u64) -> Result<Self> {
        let mut nets = Self::new(model)?;
        for (k, role) in NetRole::ALL.into_iter().enumerate() {
            init_weights(nets.get_mut(role), std, &mut stream_rng(seed, DOMAIN_INIT, k as u64))?;
        }
        Ok(nets)
    }

    pub fn get(&self, role: NetRole) -> &Network<f32> {
        match role {
            NetRole::Generator => &self.generator,
            NetRole::Remover => &self.remover,
            NetRole::Refiner => &self.refiner,
            NetRole::Discriminator => &self.discriminator,
        }
    }

    pub fn get_mut(&mut self, role: NetRole) -> &mut Network<f32> {
        match role {
            NetRole::Generator => &mut self.generator,
            NetRole::Remover => &mut self.remover,
            NetRole::Refiner => &mut self.refiner,
            NetRole::Discriminator => &mut self.discriminator,
        }
    }

    fn generator_side_params(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for net in [&mut self.generator, &mut self.remover, &mut self.refiner] {
            out.extend(net.params_mut().iter_mut().map(|p| &mut p.value));
        }
        out
    }
}

/// Step counters and optimizer moments; with the networks, all a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub gen_opt: Adam,
    pub dis_opt: Adam,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            step: 0,
            gen_opt: Adam::new(cfg.beta1, cfg.beta2),
            dis_opt: Adam::new(cfg.beta1, cfg.beta2),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub gan: f64,
    pub iden: f64,
    pub rem: f64,
    pub full: f64,
    pub area: f64,
    pub total: f64,
    pub dis: f64,
}

impl LogRow {
    fn new(step: usize, epoch: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            gan: b.gan,
            iden: b.iden,
            rem: b.rem,
            full: b.full,
            area: b.area,
            total: b.total,
            dis: b.dis,
        }
    }
}

struct BoundNets<'t, 'n> {
    g: Bound<'t, 'n, f32>,
    i: Bound<'t, 'n, f32>,
    r: Bound<'t, 'n, f32>,
    d: Bound<'t, 'n, f32>,
}

impl<'t, 'n> BoundNets<'t, 'n> {
    /// Generator-side networks trainable, discriminator frozen.
    fn generator_side(tape: &'t Tape<f32>, nets: &'n Networks) -> Self {
        Self {
            g: nets.generator.bind(tape, true),
            i: nets.remover.bind(tape, true),
            r: nets.refiner.bind(tape, true),
            d: nets.discriminator.bind(tape, false),
        }
    }

    fn role_vars(&self, role: NetRole) -> &[Var<'t, f32>] {
        match role {
            NetRole::Generator => self.g.vars(),
            NetRole::Remover => self.i.vars(),
            NetRole::Refiner => self.r.vars(),
            NetRole::Discriminator => self.d.vars(),
        }
    }
}

/// Generator-side loss terms in the order gan, iden, rem, full, area.
struct GenGraph<'t> {
    terms: [Var<'t, f32>; 5],
    pseudo_shadow: Option<Tensor<f32>>,
}

pub const TERM_NAMES: [&str; 5] = ["gan", "iden", "rem", "full", "area"];

fn outside(image: &ImageNorm, mask: &ShadowMask) -> Result<Tensor<f32>> {
    Ok(mask_region(image, &mask.complement())?.into_tensor())
}

fn build_generator_side<'t>(
    tape: &'t Tape<f32>,
    nets: &BoundNets<'t, '_>,
    input: &StepInput,
    cfg: &TrainConfig,
) -> Result<GenGraph<'t>> {
    match input {
        StepInput::Weak { pair, .. } => {
            let m = pair.sample_mask.to_tensor::<f32>();
            let ms = pair.source_mask.to_tensor::<f32>();
            let rn = tape.constant(pair.nonshadow_region.tensor().clone());
            let rs = tape.constant(pair.shadow_region.tensor().clone());
            let s = tape.constant(pair.source_image.tensor().clone());

            let rps = forward_generate(&nets.g, rn, &m)?;
            let rps_in = if cfg.detach_g_from_i { rps.detach() } else { rps };
            let rf = forward_remove(&nets.i, rps_in, &m)?;
            let rf_in = if cfg.detach_i_from_r { rf.detach() } else { rf };
            let re = rf_in
                .add(tape.constant(outside(&pair.source_image, &pair.sample_mask)?))
                .concat_channels(tape.constant(m.clone()));
            let rr = forward_refine(&nets.r, re)?;

            let gan = loss_gen(forward_discriminate(&nets.d, rps)?);
            let iden = loss_identity(forward_generate(&nets.g, rs, &ms)?, rs);
            let rem = loss_removal(rf, rn);
            let full = loss_full(rr, s);
            let area = loss_area(rr, s, &pair.sample_mask, cfg.tau);
            Ok(GenGraph {
                terms: [gan, iden, rem, full, area],
                pseudo_shadow: Some(rps.value().as_ref().clone()),
            })
        }
        StepInput::Supervised {
            image,
            mask,
            shadow_free,
        } => {
            let m = mask.to_tensor::<f32>();
            let rs = tape.constant(mask_region(image, mask)?.into_tensor());
            let target = tape.constant(mask_region(shadow_free, mask)?.into_tensor());
            let free = tape.constant(shadow_free.tensor().clone());

            let rf = forward_remove(&nets.i, rs, &m)?;
            let rf_in = if cfg.detach_i_from_r { rf.detach() } else { rf };
            let re = rf_in
                .add(tape.constant(outside(image, mask)?))
                .concat_channels(tape.constant(m.clone()));
            let rr = forward_refine(&nets.r, re)?;
            let zero = tape.constant(Tensor::scalar(0.0));
            Ok(GenGraph {
                terms: [
                    zero,
                    zero,
                    loss_removal(rf, target),
                    loss_full(rr, free),
                    loss_area(rr, free, mask, cfg.tau),
                ],
                pseudo_shadow: None,
            })
        }
    }
}

fn collect_grads(grads: &crate::autograd::Gradients<f32>, vars: &[Var<'_, f32>], acc: &mut Vec<Tensor<f32>>) {
    if acc.is_empty() {
        acc.extend(vars.iter().map(|v| Tensor::zeros(&v.shape())));
    }
    for (a, v) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.get(*v) {
            a.add_assign(g);
        }
    }
}

/// Squared gradient norm reaching each network from each generator-side term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientFlow {
    pub sq_norms: BTreeMap<(&'static str, NetRole), f64>,
}

impl GradientFlow {
    pub fn get(&self, term: &str, role: NetRole) -> f64 {
        self.sq_norms
            .iter()
            .find(|((t, r), _)| *t == term && *r == role)
            .map_or(0.0, |(_, v)| *v)
    }

    /// Whether any gradient at all reaches `role` from `term`.
    pub fn reaches(&self, term: &str, role: NetRole) -> bool {
        self.get(term, role) != 0.0
    }
}

/// Back-propagate each generator-side term on its own and record which
/// networks receive gradient.
pub fn gradient_flow(nets: &Networks, input: &StepInput, cfg: &TrainConfig) -> Result<GradientFlow> {
    let mut flow = GradientFlow::default();
    for (k, term) in TERM_NAMES.into_iter().enumerate() {
        let tape = Tape::new();
        let bound = BoundNets::generator_side(&tape, nets);
        let graph = build_generator_side(&tape, &bound, input, cfg)?;
        let grads = tape.backward(graph.terms[k]);
        for role in NetRole::ALL {
            let sq: f64 = bound
                .role_vars(role)
                .iter()
                .filter_map(|v| grads.get(*v))
                .map(|g| g.data().iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>())
                .sum();
            flow.sq_norms.insert((term, role), sq);
        }
    }
    Ok(flow)
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub history: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

/// Config snapshot and provenance of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Config,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub dataset_len: usize,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub wall_clock_secs: Option<f64>,
    pub steps: usize,
    pub resumed_from: Option<PathBuf>,
    pub version: String,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub const LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

pub struct Trainer {
    pub config: Config,
    pub nets: Networks,
    pub state: TrainState,
}

impl Trainer {
    /// Fresh networks initialized from `config.train.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let nets = Networks::initialized(&config.model, config.train.init_std, config.train.seed)?;
        let state = TrainState::new(&config.train);
        Ok(Self { config, nets, state })
    }

    /// One generator-side update followed by one discriminator update.
    /// Gradients are averaged over the inputs of the batch.
    pub fn step(&mut self, batch: &[StepInput]) -> Result<LossBreakdown> {
        let (mut terms, fakes) = self.generator_step(batch)?;
        terms.dis = self.discriminator_step(batch, &fakes)?;
        self.state.step += 1;
        total_loss(&terms, &self.config.train.weights)
    }

    /// Update G, I and R on the weighted generator-side objective. Returns the
    /// batch-mean terms (with `dis` unset) and the pseudo shadows for the
    /// discriminator, computed before the update.
    pub fn generator_step(&mut self, batch: &[StepInput]) -> Result<(LossTerms, Vec<Option<Tensor<f32>>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let cfg = &self.config.train;
        let lr = lr_at(self.state.epoch, cfg)?;
        let mut grads_acc = Vec::new();
        let mut sums = [0.0f64; 5];
        let mut fakes = Vec::with_capacity(batch.len());
        for input in batch {
            let tape = Tape::new();
            let bound = BoundNets::generator_side(&tape, &self.nets);
            let graph = build_generator_side(&tape, &bound, input, cfg)?;
            let values = graph.terms.map(|t| f64::from(t.item()));
            for (name, v) in TERM_NAMES.iter().zip(values) {
                if !v.is_finite() {
                    return Err(Error::Diverged { term: name, value: v });
                }
            }
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            let grads = tape.backward(weighted_sum(graph.terms, &cfg.weights));
            let vars: Vec<Var<'_, f32>> = [NetRole::Generator, NetRole::Remover, NetRole::Refiner]
                .into_iter()
                .flat_map(|role| bound.role_vars(role).to_vec())
                .collect();
            collect_grads(&grads, &vars, &mut grads_acc);
            fakes.push(graph.pseudo_shadow);
        }
        let scale = 1.0 / batch.len() as f32;
        let grads: Vec<Tensor<f32>> = grads_acc.into_iter().map(|g| g.map(|x| x * scale)).collect();
        let mut params = self.nets.generator_side_params();
        self.state.gen_opt.step(&mut params, &grads, lr)?;
        let n = batch.len() as f64;
        let terms = LossTerms {
            gan: sums[0] / n,
            iden: sums[1] / n,
            rem: sums[2] / n,
            full: sums[3] / n,
            area: sums[4] / n,
            dis: 0.0,
        };
        Ok((terms, fakes))
    }

    /// Update D on detached pseudo shadows against real shadow regions.
    /// Inputs without a pseudo shadow are skipped; returns the mean objective.
    pub fn discriminator_step(&mut self, batch: &[StepInput], fakes: &[Option<Tensor<f32>>]) -> Result<f64> {
        let lr = lr_at(self.state.epoch, &self.config.train)?;
        let mut sum = 0.0;
        let mut count = 0;
        let mut grads_acc = Vec::new();
        for (input, fake) in batch.iter().zip(fakes) {
            let (StepInput::Weak { real_shadow, .. }, Some(fake)) = (input, fake) else {
                continue;
            };
            let tape = Tape::new();
            let d = self.nets.discriminator.bind(&tape, true);
            let score_fake = forward_discriminate(&d, tape.constant(fake.clone()))?;
            let score_real = forward_discriminate(&d, tape.constant(real_shadow.tensor().clone()))?;
            let loss = loss_dis(score_fake, score_real);
            let v = f64::from(loss.item());
            if !v.is_finite() {
                return Err(Error::Diverged { term: "dis", value: v });
            }
            sum += v;
            count += 1;
            collect_grads(&tape.backward(loss), d.vars(), &mut grads_acc);
        }
        if count == 0 {
            return Ok(0.0);
        }
        let scale = 1.0 / count as f32;
        let grads: Vec<Tensor<f32>> = grads_acc.into_iter().map(|g| g.map(|x| x * scale)).collect();
        let mut params: Vec<&mut Tensor<f32>> = self
            .nets
            .discriminator
            .params_mut()
            .iter_mut()
            .map(|p| &mut p.value)
            .collect();
        self.state.dis_opt.step(&mut params, &grads, lr)?;
        Ok(sum / count as f64)
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.train.batch_size)
    }

    /// Whether the run has reached its epoch count or step limit.
    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.train.epochs
            || self.config.train.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Train until the schedule or `max_steps` ends. With `out_dir`, writes the
    /// training log, per-epoch checkpoints (keeping the most recent ones), the
    /// final checkpoint and the run manifest there.
    pub fn run(&mut self, source: &dyn SampleSource, out_dir: Option<&Path>) -> Result<RunSummary> {
        self.run_with(source, out_dir, None, |_| {})
    }

    pub fn run_with(
        &mut self,
        source: &dyn SampleSource,
        out_dir: Option<&Path>,
        resumed_from: Option<&Path>,
        mut on_step: impl FnMut(&LogRow),
    ) -> Result<RunSummary> {
        if source.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let started = Instant::now();
        let n = source.len();
        let pool = if self.config.train.supervised_mode {
            Vec::new()
        } else {
            mask_pool(source, self.config.augment.crop_size)?
        };
        let mut summary = RunSummary::default();
        let mut manifest = RunManifest {
            config: self.config.clone(),
            seed: self.config.train.seed,
            dataset_fingerprint: source.fingerprint()?,
            dataset_len: n,
            started_unix: unix_now(),
            finished_unix: None,
            wall_clock_secs: None,
            steps: self.state.step,
            resumed_from: resumed_from.map(Path::to_path_buf),
            version: env!("CARGO_PKG_VERSION").to_owned(),
        };
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(MANIFEST_FILE);
                fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
                summary.manifest = Some(path);
                Some(open_log(&dir.join(LOG_FILE), self.state.step > 0)?)
            }
            None => None,
        };

        let spe = self.steps_per_epoch(n);
        let batch_size = self.config.train.batch_size;
        while !self.finished() {
            let order = epoch_order(self.config.train.seed, self.state.epoch, n);
            let first = self.state.step.saturating_sub(self.state.epoch * spe);
            for b in first..spe {
                if self.finished() {
                    break;
                }
                let mut rng = stream_rng(self.config.train.seed, DOMAIN_STEP, self.state.step as u64);
                let batch = order[b * batch_size..((b + 1) * batch_size).min(n)]
                    .iter()
                    .map(|&i| prepare_input(source, i, &pool, &self.config, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let step = self.state.step;
                let breakdown = match self.step(&batch) {
                    Ok(b) => b,
                    Err(e @ Error::Diverged { .. }) => {
                        if let Some(dir) = out_dir {
                            let path = dir.join("diverged.safetensors");
                            save_checkpoint(self, &path)?;
                            log::error!("{e}; state before the failing step saved to {}", path.display());
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                let row = LogRow::new(step, self.state.epoch, &breakdown);
                if let Some(w) = log.as_mut() {
                    w.serialize(row).map_err(csv_err)?;
                    w.flush()?;
                }
                log::debug!("step {step} total {:.4} dis {:.4}", row.total, row.dis);
                on_step(&row);
                summary.history.push(row);
            }
            if self.state.step >= (self.state.epoch + 1) * spe {
                self.state.epoch += 1;
                log::info!("epoch {} done at step {}", self.state.epoch, self.state.step);
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("epoch_{:04}.safetensors", self.state.epoch));
                    save_checkpoint(self, &path)?;
                    summary.checkpoints.push(path);
                    prune_checkpoints(dir, self.config.train.keep_checkpoints)?;
                    summary.checkpoints.retain(|p| p.exists());
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(self, &path)?;
            summary.final_checkpoint = Some(path);
            manifest.finished_unix = Some(unix_now());
            manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
            manifest.steps = self.state.step;
            fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        }
        Ok(summary)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn open_log(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = if exists {
        OpenOptions::new().append(true).open(path)?
    } else {
        File::create(path)?
    };
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

/// Delete all but the newest `keep` per-epoch checkpoints in `dir`.
fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".safetensors"))
        })
        .collect();
    found.sort();
    let excess = found.len().saturating_sub(keep);
    for old in &found[..excess] {
        fs::remove_file(old)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
