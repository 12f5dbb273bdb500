//! Training loops: stage 1 (cascade on MSE), stage 2 (refiner against a
//! discriminator with the cascade frozen), the joint ablation, and the
//! segmenter. All loops are single-threaded and resume exactly.
//!
//! Output directory:
//! * `best/<net>/`: parameters from the best validation epoch.
//! * `last/<net>/` and `last/state.json`: everything needed to continue,
//!   including Adam moments, RNG positions and the replay buffer.
//! * `log.jsonl`: one record per optimizer step and one per epoch.
//!
//! Net directory names are `recon`, `refine`, `discriminator` and `segment`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{check_compatible, Checkpoint};
use crate::error::{Error, Result};
use crate::kspace::io::{read_json, write_json};
use crate::kspace::{acquire, generate_mask, zero_fill, ComplexImage, KSpaceSample};
use crate::losses::{
    adversarial_loss, calibrate, discriminator_loss, feature_matching_loss, l1_penalty, mse_loss, perceptual_loss,
    total_refiner_loss, LossCalibration, RefinerParts, ReplayBuffer, PROB_CLAMP,
};
use crate::metrics::{dice, psnr, segment_masks};
use crate::networks::{Architecture, FeatureExtractor, Mode, Preset, RefinerConfig, BN_MOMENTUM};
use crate::phantom::{batch_order, Dataset, LabeledImage};
use crate::rng::{substream, RngStreams, StreamState, Stream};
use crate::tensor::{adam_step, AdamConfig, Binder, ParamSet, Tape, Tensor};

pub const RECON: &str = "recon";
pub const REFINE: &str = "refine";
pub const DISCRIMINATOR: &str = "discriminator";
pub const SEGMENT: &str = "segment";

/// Images per forward pass during validation and evaluation.
pub const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Recon,
    Refine,
    Joint,
    Segment,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recon" => Ok(Stage::Recon),
            "refine" => Ok(Stage::Refine),
            "joint" => Ok(Stage::Joint),
            "segment" => Ok(Stage::Segment),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of k-space columns kept.
    pub ratio: f64,
    pub noise_std: f64,
    pub arch: Architecture,
    /// One-sided label smoothing; the discriminator's real target is
    /// `1 - smoothing`.
    pub smoothing: f64,
    pub replay_capacity: usize,
    pub replay_p: f64,
    /// Use only the first `n` training / validation images.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    /// Stop (and save a resumable state) after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn new(stage: Stage, preset: Preset) -> Self {
        let (epochs, batch_size) = match (preset, stage) {
            (Preset::Paper, Stage::Recon) => (1500, 20),
            (Preset::Paper, _) => (200, 5),
            (Preset::Desk, Stage::Recon) => (60, 8),
            (Preset::Desk, _) => (40, 8),
        };
        Self {
            stage,
            epochs,
            batch_size,
            adam: AdamConfig::default(),
            seed: 0,
            ratio: 0.25,
            noise_std: 0.0,
            arch: Architecture::preset(preset),
            smoothing: 0.1,
            replay_capacity: 80,
            replay_p: 0.5,
            train_limit: None,
            val_limit: None,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("undersampling ratio must be in (0, 1], got {}", self.ratio)));
        }
        if !(self.noise_std >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::Config("noise std must be >= 0 and the learning rate positive".into()));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("label smoothing must be in [0, 1], got {}", self.smoothing)));
        }
        Ok(())
    }

    /// Settings that must agree between a saved state and a resumed run.
    fn resume_key(&self) -> TrainConfig {
        TrainConfig { epochs: 0, max_steps: None, ..self.clone() }
    }
}

/// Mean losses and validation results of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub losses: BTreeMap<String, f64>,
    pub validation: Validation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    /// Training objective on the validation split (lower is better).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub objective: Option<f64>,
    /// Mean Dice of the segmenter on validation images with an ROI.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
}

impl Validation {
    /// Model-selection score, higher is better.
    fn score(&self, stage: Stage) -> Option<f64> {
        match stage {
            Stage::Recon => self.psnr,
            Stage::Refine | Stage::Joint => self.objective.map(|o| -o),
            Stage::Segment => self.dice,
        }
    }
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    /// `step` or `epoch`.
    pub kind: String,
    pub losses: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<Validation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub calibration: Option<LossCalibration>,
}

/// Everything besides network parameters that a resumed run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epoch: u64,
    /// Next batch index within `epoch`.
    pub batch: usize,
    pub global_step: u64,
    pub best_score: Option<f64>,
    pub best_epoch: Option<u64>,
    pub calibration: Option<LossCalibration>,
    pub replay: Option<ReplayBuffer<f32>>,
    pub rng: BTreeMap<String, StreamState>,
    pub history: Vec<EpochRecord>,
    /// Loss sums over the steps of the current, unfinished epoch.
    pub epoch_sums: BTreeMap<String, f64>,
    pub epoch_steps: u64,
    /// Fingerprint of the frozen stage-1 cascade (stage 2 only).
    pub recon_fingerprint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub state: TrainState,
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
}

/// Trainable networks of one run. The cascade is also present, frozen, in
/// stage 2.
#[derive(Debug, Clone, Default)]
struct Nets {
    r: Option<ParamSet<f32>>,
    v: Option<ParamSet<f32>>,
    d: Option<ParamSet<f32>>,
    s: Option<ParamSet<f32>>,
}

impl Nets {
    fn arch_of(arch: &Architecture, name: &str) -> Value {
        let v = match name {
            RECON => serde_json::to_value(&arch.cascade),
            REFINE => serde_json::to_value(&arch.refiner),
            DISCRIMINATOR => serde_json::to_value(&arch.discriminator),
            _ => serde_json::to_value(&arch.segmenter),
        };
        v.expect("configs serialize")
    }

    /// Networks that a stage trains (and therefore saves).
    fn trained(&self, stage: Stage) -> Vec<(&'static str, &ParamSet<f32>)> {
        fn pick<'p>(name: &'static str, p: &'p Option<ParamSet<f32>>) -> Option<(&'static str, &'p ParamSet<f32>)> {
            p.as_ref().map(|p| (name, p))
        }
        let all = match stage {
            Stage::Recon => vec![pick(RECON, &self.r)],
            Stage::Refine => vec![pick(REFINE, &self.v), pick(DISCRIMINATOR, &self.d)],
            Stage::Joint => vec![pick(RECON, &self.r), pick(REFINE, &self.v), pick(DISCRIMINATOR, &self.d)],
            Stage::Segment => vec![pick(SEGMENT, &self.s)],
        };
        all.into_iter().flatten().collect()
    }

    fn save(&self, stage: Stage, arch: &Architecture, dir: &Path, with_optimizer: bool) -> Result<()> {
        for (name, params) in self.trained(stage) {
            Checkpoint::new(name, Self::arch_of(arch, name), params.clone()).save(&dir.join(name), with_optimizer)?;
        }
        Ok(())
    }

    fn slot(&mut self, name: &str) -> &mut Option<ParamSet<f32>> {
        match name {
            RECON => &mut self.r,
            REFINE => &mut self.v,
            DISCRIMINATOR => &mut self.d,
            _ => &mut self.s,
        }
    }
}

/// Freshly initialized networks of a stage, drawn in a fixed order. The
/// stage-2 cascade is not among them; it comes from stage 1.
fn fresh_nets(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Nets> {
    let arch = &cfg.arch;
    let mut nets = Nets::default();
    match cfg.stage {
        Stage::Recon => nets.r = Some(arch.cascade.init(rng)?),
        Stage::Refine => {
            nets.v = Some(arch.refiner.init(rng)?);
            nets.d = Some(arch.discriminator.init(rng)?);
        }
        Stage::Joint => {
            nets.r = Some(arch.cascade.init(rng)?);
            nets.v = Some(RefinerConfig { gate_init: 1.0, ..arch.refiner.clone() }.init(rng)?);
            nets.d = Some(arch.discriminator.init(rng)?);
        }
        Stage::Segment => nets.s = Some(arch.segmenter.init(rng)?),
    }
    Ok(nets)
}

/// Loads a checkpoint of `kind` from either the checkpoint directory itself
/// or a run directory containing `best/<kind>`.
pub fn load_net(path: &Path, kind: &str) -> Result<Checkpoint<f32>> {
    let dir = if path.join("manifest.json").exists() { path.to_path_buf() } else { path.join("best").join(kind) };
    if !dir.join("manifest.json").exists() {
        return Err(Error::Contract(format!("no '{kind}' checkpoint at {}", path.display())));
    }
    Checkpoint::load_kind(&dir, kind)
}

/// Network configuration stored in a checkpoint.
pub fn arch_from<C: for<'de> Deserialize<'de>>(ck: &Checkpoint<f32>, path: &Path) -> Result<C> {
    serde_json::from_value(ck.arch.clone()).map_err(|e| Error::load(path, format!("architecture does not parse: {e}")))
}

/// Fresh k-space acquisitions for a training batch, drawn from the mask and
/// noise streams in batch order.
fn acquire_fresh(items: &[&LabeledImage], cfg: &TrainConfig, streams: &mut RngStreams) -> Result<Vec<KSpaceSample>> {
    items
        .iter()
        .map(|it| {
            let img = &it.image;
            let mask = generate_mask(img.width(), img.height(), cfg.ratio, streams.get(Stream::Masks))?;
            acquire(img, &mask, cfg.noise_std, streams.get(Stream::Noise))
        })
        .collect()
}

/// Acquisitions whose mask and noise depend only on `(seed, tag, id)`, so
/// every method sees the same measurements of an image.
pub fn fixed_samples(items: &[&LabeledImage], ratio: f64, noise_std: f64, seed: u64, tag: &str) -> Result<Vec<KSpaceSample>> {
    items
        .iter()
        .map(|it| {
            let img = &it.image;
            let mask = generate_mask(img.width(), img.height(), ratio, &mut substream(seed, &format!("{tag}-mask"), it.id))?;
            acquire(img, &mask, noise_std, &mut substream(seed, &format!("{tag}-noise"), it.id))
        })
        .collect()
}

fn zero_filled_batch(samples: &[KSpaceSample]) -> Result<Tensor<f32>> {
    let zf: Vec<ComplexImage> = samples.iter().map(zero_fill).collect();
    ComplexImage::batch(&zf.iter().collect::<Vec<_>>())
}

fn image_batch(items: &[&LabeledImage]) -> Result<Tensor<f32>> {
    ComplexImage::batch(&items.iter().map(|i| &i.image).collect::<Vec<_>>())
}

fn magnitude_batch(items: &[&LabeledImage]) -> Result<Tensor<f32>> {
    let (h, w) = (items[0].image.height(), items[0].image.width());
    let data = items.iter().flat_map(|i| i.image.magnitude()).map(|v| v as f32).collect();
    Tensor::new([items.len(), 1, h, w], data)
}

/// Stage-2 refinement of reconstructions, eval mode, no gradients.
pub fn refine_images(cfg: &RefinerConfig, params: &ParamSet<f32>, x_rec: &[ComplexImage]) -> Result<Vec<ComplexImage>> {
    let mut out = Vec::with_capacity(x_rec.len());
    for chunk in x_rec.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let x = tape.constant(ComplexImage::batch::<f32>(&chunk.iter().collect::<Vec<_>>())?);
        let mut binder = Binder::frozen(params);
        let y = cfg.forward(&mut tape, &mut binder, x, Mode::Eval)?;
        out.extend(ComplexImage::unbatch(tape.value(y.x_hat))?);
    }
    Ok(out)
}

/// Cascade reconstructions in chunks.
pub fn reconstruct_images(cfg: &crate::networks::CascadeConfig, params: &ParamSet<f32>, samples: &[KSpaceSample]) -> Result<Vec<ComplexImage>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        out.extend(crate::networks::reconstruct(cfg, params, chunk)?);
    }
    Ok(out)
}

fn mean_psnr(gt: &[&LabeledImage], rec: &[ComplexImage]) -> Result<f64> {
    let mut sum = 0.0;
    for (g, r) in gt.iter().zip(rec) {
        sum += psnr(&g.image.magnitude(), &r.magnitude(), g.image.intensity_scale)?;
    }
    Ok(sum / gt.len() as f64)
}

fn check_finite(losses: &BTreeMap<String, f64>, step: u64) -> Result<()> {
    if let Some((k, v)) = losses.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite {k} loss ({v}) at step {step}")));
    }
    Ok(())
}

struct Session<'a> {
    cfg: TrainConfig,
    train: Vec<&'a LabeledImage>,
    val: Vec<&'a LabeledImage>,
    val_samples: Vec<KSpaceSample>,
    nets: Nets,
    extractor: Option<FeatureExtractor<f32>>,
    streams: RngStreams,
    state: TrainState,
    out: PathBuf,
}

impl<'a> Session<'a> {
    fn new(cfg: &TrainConfig, data: &'a Dataset, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let take = |items: &'a [LabeledImage], limit: Option<usize>| {
            items.iter().take(limit.unwrap_or(usize::MAX)).collect::<Vec<_>>()
        };
        let train = take(&data.train, cfg.train_limit);
        let val = take(&data.val, cfg.val_limit);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation sets must be non-empty".into()));
        }
        let val_samples = match cfg.stage {
            Stage::Segment => Vec::new(),
            _ => fixed_samples(&val, cfg.ratio, cfg.noise_std, cfg.seed, "val")?,
        };
        let extractor = match cfg.stage {
            Stage::Refine | Stage::Joint => Some(FeatureExtractor::new(cfg.arch.features.clone())?),
            _ => None,
        };
        let streams = RngStreams::new(cfg.seed);
        let state = TrainState {
            config: cfg.clone(),
            epoch: 0,
            batch: 0,
            global_step: 0,
            best_score: None,
            best_epoch: None,
            calibration: None,
            replay: None,
            rng: streams.state(),
            history: Vec::new(),
            epoch_sums: BTreeMap::new(),
            epoch_steps: 0,
            recon_fingerprint: None,
        };
        Ok(Self { cfg: cfg.clone(), train, val, val_samples, nets: Nets::default(), extractor, streams, state, out: out.to_path_buf() })
    }

    fn last_dir(&self) -> PathBuf {
        self.out.join("last")
    }

    fn best_dir(&self) -> PathBuf {
        self.out.join("best")
    }

    fn init_fresh(&mut self) -> Result<()> {
        self.nets = fresh_nets(&self.cfg, self.streams.get(Stream::Init))?;
        if matches!(self.cfg.stage, Stage::Refine | Stage::Joint) {
            self.state.replay = Some(ReplayBuffer::new(self.cfg.replay_capacity, self.cfg.replay_p)?);
        }
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        // A fresh run must not inherit checkpoints of an earlier one.
        for dir in [self.best_dir(), self.last_dir()] {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
        let log = self.out.join("log.jsonl");
        fs::write(&log, "").map_err(|e| Error::io(&log, e))
    }

    /// Restores parameters, optimizer moments and progress from `last/`.
    fn restore(&mut self) -> Result<()> {
        let last = self.last_dir();
        let spath = last.join("state.json");
        let state: TrainState = read_json(&spath)?;
        if state.config.resume_key() != self.cfg.resume_key() {
            return Err(Error::Contract(format!(
                "{} was written with a different configuration; only epochs and max_steps may change on resume",
                spath.display()
            )));
        }
        // Freshly initialized networks supply the expected names and shapes.
        let template = fresh_nets(&self.cfg, &mut substream(0, "template", 0))?;
        for (name, expected) in template.trained(self.cfg.stage) {
            let dir = last.join(name);
            let ck = Checkpoint::<f32>::load_kind(&dir, name)?;
            check_compatible(expected, &ck.params, &dir)?;
            *self.nets.slot(name) = Some(ck.params);
        }
        self.streams = RngStreams::from_state(&state.rng)?;
        let log = self.out.join("log.jsonl");
        let text = fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
        let mut kept = String::new();
        for line in text.lines() {
            let rec: LogRecord = serde_json::from_str(line).map_err(|e| Error::Json { path: log.clone(), source: e })?;
            if rec.step <= state.global_step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(&log, kept).map_err(|e| Error::io(&log, e))?;
        self.state = TrainState { config: self.cfg.clone(), ..state };
        Ok(())
    }

    fn log(&self, rec: &LogRecord) -> Result<()> {
        let path = self.out.join("log.jsonl");
        let mut f = fs::OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(rec).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn save_last(&mut self) -> Result<()> {
        let last = self.last_dir();
        self.nets.save(self.cfg.stage, &self.cfg.arch, &last, true)?;
        self.state.rng = self.streams.state();
        write_json(&last.join("state.json"), &self.state)
    }

    fn run(&mut self) -> Result<()> {
        let n = self.train.len();
        while self.state.epoch < self.cfg.epochs {
            let epoch = self.state.epoch;
            let order = batch_order(n, self.cfg.batch_size, self.cfg.seed, epoch, true)?;
            while self.state.batch < order.len() {
                if self.cfg.max_steps.is_some_and(|m| self.state.global_step >= m) {
                    return self.save_last();
                }
                let items: Vec<&LabeledImage> = order[self.state.batch].iter().map(|&i| self.train[i]).collect();
                let (losses, calibration) = self.step(&items)?;
                self.state.global_step += 1;
                self.state.batch += 1;
                check_finite(&losses, self.state.global_step)?;
                log::debug!("step {}: {losses:?}", self.state.global_step);
                for (k, v) in &losses {
                    *self.state.epoch_sums.entry(k.clone()).or_insert(0.0) += v;
                }
                self.state.epoch_steps += 1;
                self.log(&LogRecord {
                    step: self.state.global_step,
                    epoch,
                    kind: "step".into(),
                    losses,
                    val_psnr: None,
                    validation: None,
                    calibration,
                })?;
            }
            let validation = self.validate()?;
            let steps = self.state.epoch_steps.max(1) as f64;
            let losses: BTreeMap<String, f64> = self.state.epoch_sums.iter().map(|(k, v)| (k.clone(), v / steps)).collect();
            check_finite(&losses, self.state.global_step)?;
            self.log(&LogRecord {
                step: self.state.global_step,
                epoch,
                kind: "epoch".into(),
                losses: losses.clone(),
                val_psnr: validation.psnr,
                validation: Some(validation.clone()),
                calibration: None,
            })?;
            log::info!(
                "{:?} epoch {}/{}: {} | validation {}",
                self.cfg.stage,
                epoch + 1,
                self.cfg.epochs,
                losses.iter().map(|(k, v)| format!("{k} {v:.4e}")).collect::<Vec<_>>().join(", "),
                serde_json::to_string(&validation).unwrap_or_default()
            );
            if let Some(score) = validation.score(self.cfg.stage) {
                if self.state.best_score.is_none_or(|b| score > b) {
                    self.state.best_score = Some(score);
                    self.state.best_epoch = Some(epoch);
                    self.nets.save(self.cfg.stage, &self.cfg.arch, &self.best_dir(), false)?;
                }
            }
            self.state.history.push(EpochRecord { epoch, losses, validation });
            self.state.epoch += 1;
            self.state.batch = 0;
            self.state.epoch_sums.clear();
            self.state.epoch_steps = 0;
            self.save_last()?;
        }
        if !self.best_dir().exists() {
            self.nets.save(self.cfg.stage, &self.cfg.arch, &self.best_dir(), false)?;
        }
        self.save_last()
    }

    fn step(&mut self, items: &[&LabeledImage]) -> Result<(BTreeMap<String, f64>, Option<LossCalibration>)> {
        match self.cfg.stage {
            Stage::Recon => Ok((self.step_recon(items)?, None)),
            Stage::Refine | Stage::Joint => self.step_adversarial(items),
            Stage::Segment => Ok((self.step_segment(items)?, None)),
        }
    }

    fn step_recon(&mut self, items: &[&LabeledImage]) -> Result<BTreeMap<String, f64>> {
        let samples = acquire_fresh(items, &self.cfg, &mut self.streams)?;
        let r = self.nets.r.as_mut().expect("recon stage holds R");
        let mut tape = Tape::new();
        let x_u = tape.constant(zero_filled_batch(&samples)?);
        let target = tape.constant(image_batch(items)?);
        let mut binder = Binder::trainable(&*r);
        let y = self.cfg.arch.cascade.forward(&mut tape, &mut binder, x_u, &samples)?;
        let loss = mse_loss(&mut tape, target, y)?;
        let grads = tape.backward(loss)?;
        let bindings = binder.into_bindings();
        r.absorb(bindings, Some(&grads), BN_MOMENTUM)?;
        adam_step(r, &self.cfg.adam)?;
        Ok(BTreeMap::from([("mse".to_string(), tape.item(loss) as f64)]))
    }

    fn step_segment(&mut self, items: &[&LabeledImage]) -> Result<BTreeMap<String, f64>> {
        let s = self.nets.s.as_mut().expect("segment stage holds S");
        let mut tape = Tape::new();
        let x = tape.constant(magnitude_batch(items)?);
        let mut binder = Binder::trainable(&*s);
        let p = self.cfg.arch.segmenter.forward(&mut tape, &mut binder, x, Mode::Train)?;
        let targets: Vec<f32> = items.iter().flat_map(|i| i.label.iter().map(|&l| l as f32)).collect();
        let (lo, hi) = (PROB_CLAMP as f32, 1.0 - PROB_CLAMP as f32);
        let loss = tape.bce_targets(p, targets, lo, hi)?;
        let grads = tape.backward(loss)?;
        let bindings = binder.into_bindings();
        s.absorb(bindings, Some(&grads), BN_MOMENTUM)?;
        adam_step(s, &self.cfg.adam)?;
        Ok(BTreeMap::from([("bce".to_string(), tape.item(loss) as f64)]))
    }

    /// One discriminator update followed by one refiner (and, in the joint
    /// ablation, cascade) update on the same batch.
    fn step_adversarial(&mut self, items: &[&LabeledImage]) -> Result<(BTreeMap<String, f64>, Option<LossCalibration>)> {
        let joint = self.cfg.stage == Stage::Joint;
        let arch = &self.cfg.arch;
        let samples = acquire_fresh(items, &self.cfg, &mut self.streams)?;
        let x_true = image_batch(items)?;
        let Nets { r, v, d, .. } = &mut self.nets;
        let (r, v, d) = (r.as_mut().expect("R present"), v.as_mut().expect("V present"), d.as_mut().expect("D present"));
        let extractor = self.extractor.as_ref().expect("extractor present");

        let mut tape = Tape::new();
        let x_u = tape.constant(zero_filled_batch(&samples)?);
        let mut rb = if joint { Binder::trainable(&*r) } else { Binder::frozen(&*r) };
        let x_rec = arch.cascade.forward(&mut tape, &mut rb, x_u, &samples)?;
        let mut vb = Binder::trainable(&*v);
        let out = arch.refiner.forward(&mut tape, &mut vb, x_rec, Mode::Train)?;

        // Discriminator step on the real batch and replay-mixed, detached fakes.
        let replay = self.state.replay.as_mut().expect("replay buffer present");
        let (fakes, drawn) = replay.push_sample(tape.value(out.x_hat), self.streams.get(Stream::Replay))?;
        let d_loss = {
            let mut dt = Tape::new();
            let real = dt.constant(x_true.clone());
            let fake = dt.constant(fakes);
            let mut db = Binder::trainable(&*d);
            let on_real = arch.discriminator.forward(&mut dt, &mut db, real, Some(self.streams.get(Stream::Dropout)))?;
            let on_fake = arch.discriminator.forward(&mut dt, &mut db, fake, Some(self.streams.get(Stream::Dropout)))?;
            let loss = discriminator_loss(&mut dt, on_real.prob, on_fake.prob, self.cfg.smoothing)?;
            let grads = dt.backward(loss)?;
            let bindings = db.into_bindings();
            d.absorb(bindings, Some(&grads), BN_MOMENTUM)?;
            adam_step(d, &self.cfg.adam)?;
            dt.item(loss) as f64
        };

        // Refiner step against the updated discriminator, without dropout.
        let real = tape.constant(x_true);
        let mut db = Binder::frozen(&*d);
        let on_fake = arch.discriminator.forward::<f32, ChaCha8Rng>(&mut tape, &mut db, out.x_hat, None)?;
        let on_real = arch.discriminator.forward::<f32, ChaCha8Rng>(&mut tape, &mut db, real, None)?;
        let parts = RefinerParts {
            adv: adversarial_loss(&mut tape, on_fake.prob),
            feat: feature_matching_loss(&mut tape, &on_real.features, &on_fake.features)?,
            vgg: perceptual_loss(&mut tape, extractor, real, out.x_hat)?,
            pen: l1_penalty(&mut tape, out.x_v)?,
        };
        let values = parts.values(&tape);
        let fresh_calibration = match self.state.calibration {
            Some(_) => None,
            None => Some(calibrate(&mut self.state.calibration, &values)?),
        };
        let calib = self.state.calibration.expect("calibrated above");
        let total = total_refiner_loss(&mut tape, &parts, &calib)?;
        let (loss, mse) = if joint {
            let mse = mse_loss(&mut tape, real, out.x_hat)?;
            (tape.add(mse, total)?, Some(tape.item(mse) as f64))
        } else {
            (total, None)
        };
        let grads = tape.backward(loss)?;
        let vbind = vb.into_bindings();
        v.absorb(vbind, Some(&grads), BN_MOMENTUM)?;
        adam_step(v, &self.cfg.adam)?;
        if joint {
            let rbind = rb.into_bindings();
            r.absorb(rbind, Some(&grads), BN_MOMENTUM)?;
            adam_step(r, &self.cfg.adam)?;
        }

        let mut losses = BTreeMap::from([
            ("d".to_string(), d_loss),
            ("adv".to_string(), values.adv),
            ("feat".to_string(), values.feat),
            ("vgg".to_string(), values.vgg),
            ("pen".to_string(), values.pen),
            ("total".to_string(), tape.item(total) as f64),
            ("replay_drawn".to_string(), drawn as f64),
            ("gate".to_string(), v.get(crate::networks::GATE).map(|p| p.tensor.data()[0] as f64).unwrap_or(0.0)),
        ]);
        if let Some(m) = mse {
            losses.insert("mse".into(), m);
        }
        Ok((losses, fresh_calibration))
    }

    fn validate(&self) -> Result<Validation> {
        let arch = &self.cfg.arch;
        match self.cfg.stage {
            Stage::Recon => {
                let rec = reconstruct_images(&arch.cascade, self.nets.r.as_ref().expect("R"), &self.val_samples)?;
                Ok(Validation { psnr: Some(mean_psnr(&self.val, &rec)?), ..Validation::default() })
            }
            Stage::Segment => {
                let cohort: Vec<&LabeledImage> = self.val.iter().copied().filter(|i| i.has_roi()).collect();
                if cohort.is_empty() {
                    return Ok(Validation::default());
                }
                let images: Vec<&ComplexImage> = cohort.iter().map(|i| &i.image).collect();
                let masks = segment_masks(&arch.segmenter, self.nets.s.as_ref().expect("S"), &images)?;
                let mut sum = 0.0;
                for (m, it) in masks.iter().zip(&cohort) {
                    sum += dice(m, &it.label)?;
                }
                Ok(Validation { dice: Some(sum / cohort.len() as f64), ..Validation::default() })
            }
            Stage::Refine | Stage::Joint => self.validate_adversarial(),
        }
    }

    fn validate_adversarial(&self) -> Result<Validation> {
        let arch = &self.cfg.arch;
        let (r, v, d) = (self.nets.r.as_ref().expect("R"), self.nets.v.as_ref().expect("V"), self.nets.d.as_ref().expect("D"));
        let extractor = self.extractor.as_ref().expect("extractor");
        let (mut psnr_sum, mut objective) = (0.0, 0.0);
        for (chunk, samples) in self.val.chunks(EVAL_CHUNK).zip(self.val_samples.chunks(EVAL_CHUNK)) {
            let mut tape = Tape::new();
            let x_u = tape.constant(zero_filled_batch(samples)?);
            let x_rec = arch.cascade.forward(&mut tape, &mut Binder::frozen(r), x_u, samples)?;
            let out = arch.refiner.forward(&mut tape, &mut Binder::frozen(v), x_rec, Mode::Eval)?;
            let refined = ComplexImage::unbatch(tape.value(out.x_hat))?;
            psnr_sum += mean_psnr(chunk, &refined)? * chunk.len() as f64;
            if let Some(calib) = &self.state.calibration {
                let real = tape.constant(image_batch(chunk)?);
                let mut db = Binder::frozen(d);
                let on_fake = arch.discriminator.forward::<f32, ChaCha8Rng>(&mut tape, &mut db, out.x_hat, None)?;
                let on_real = arch.discriminator.forward::<f32, ChaCha8Rng>(&mut tape, &mut db, real, None)?;
                let parts = RefinerParts {
                    adv: adversarial_loss(&mut tape, on_fake.prob),
                    feat: feature_matching_loss(&mut tape, &on_real.features, &on_fake.features)?,
                    vgg: perceptual_loss(&mut tape, extractor, real, out.x_hat)?,
                    pen: l1_penalty(&mut tape, out.x_v)?,
                };
                let mut o = calib.total(&parts.values(&tape))?;
                if self.cfg.stage == Stage::Joint {
                    let mse = mse_loss(&mut tape, real, out.x_hat)?;
                    o += tape.item(mse) as f64;
                }
                objective += o * chunk.len() as f64;
            }
        }
        let n = self.val.len() as f64;
        Ok(Validation {
            psnr: Some(psnr_sum / n),
            objective: self.state.calibration.map(|_| objective / n),
            dice: None,
        })
    }

    fn finish(self) -> TrainSummary {
        let best_dir = self.best_dir();
        let last_dir = self.last_dir();
        TrainSummary { state: self.state, best_dir, last_dir }
    }
}

fn start<'a>(cfg: &TrainConfig, stage: Stage, data: &'a Dataset, out: &Path, resume: bool) -> Result<Session<'a>> {
    if cfg.stage != stage {
        return Err(Error::Config(format!("configuration is for stage {:?}, not {stage:?}", cfg.stage)));
    }
    let mut s = Session::new(cfg, data, out)?;
    if resume {
        if !s.last_dir().join("state.json").exists() {
            return Err(Error::Contract(format!("nothing to resume: {} has no last/state.json", out.display())));
        }
        s.restore()?;
    } else {
        s.init_fresh()?;
    }
    Ok(s)
}

/// Stage 1: the cascade on MSE against fully sampled images.
pub fn train_stage1(cfg: &TrainConfig, data: &Dataset, out: &Path, resume: bool) -> Result<TrainSummary> {
    let mut s = start(cfg, Stage::Recon, data, out, resume)?;
    s.run()?;
    Ok(s.finish())
}

/// Stage 2: refiner and discriminator on top of a frozen stage-1 cascade.
pub fn train_stage2(cfg: &TrainConfig, data: &Dataset, stage1: &Path, out: &Path, resume: bool) -> Result<TrainSummary> {
    let ck = load_net(stage1, RECON).map_err(|e| match e {
        Error::Contract(m) => Error::Contract(format!("stage 2 needs a stage-1 checkpoint: {m}")),
        other => other,
    })?;
    let stored: crate::networks::CascadeConfig = arch_from(&ck, stage1)?;
    if stored != cfg.arch.cascade {
        return Err(Error::Contract(format!(
            "stage-1 checkpoint at {} was trained with a different cascade configuration",
            stage1.display()
        )));
    }
    let mut s = start(cfg, Stage::Refine, data, out, resume)?;
    let fingerprint = ck.params.fingerprint();
    if let Some(expected) = &s.state.recon_fingerprint {
        if *expected != fingerprint {
            return Err(Error::Contract("stage-1 checkpoint changed since this run started".into()));
        }
    }
    s.state.recon_fingerprint = Some(fingerprint.clone());
    s.nets.r = Some(ck.params);
    s.run()?;
    if s.nets.r.as_ref().map(ParamSet::fingerprint) != Some(fingerprint) {
        return Err(Error::Contract("stage 2 modified the frozen cascade".into()));
    }
    Ok(s.finish())
}

/// Joint ablation: cascade, refiner (gate starting at 1) and discriminator
/// trained together from scratch.
pub fn train_joint(cfg: &TrainConfig, data: &Dataset, out: &Path, resume: bool) -> Result<TrainSummary> {
    let mut s = start(cfg, Stage::Joint, data, out, resume)?;
    s.run()?;
    Ok(s.finish())
}

/// Segmentation U-Net on ground-truth magnitudes with pixelwise BCE.
pub fn train_segmenter(cfg: &TrainConfig, data: &Dataset, out: &Path, resume: bool) -> Result<TrainSummary> {
    let mut s = start(cfg, Stage::Segment, data, out, resume)?;
    s.run()?;
    Ok(s.finish())
}

/// Parses `log.jsonl`.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Json { path: path.into(), source: e }))
        .collect()
}
