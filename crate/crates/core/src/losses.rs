//! Training objectives, loss calibration and the discriminator replay buffer.
//!
//! Every norm is a per-element mean so that the calibration constants do not
//! depend on image or batch size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::FeatureExtractor;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn mse_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    tape.mse(x, x_hat)
}

/// Mean squared distance between extractor features of `x` and `x_hat`.
pub fn perceptual_loss<T: Real>(tape: &mut Tape<T>, extractor: &FeatureExtractor<T>, x: Var, x_hat: Var) -> Result<Var> {
    let fx = extractor.forward(tape, x)?;
    let fy = extractor.forward(tape, x_hat)?;
    tape.mse(fx, fy)
}

fn bce<T: Real>(tape: &mut Tape<T>, p: Var, target: f64) -> Var {
    tape.bce(p, T::of(target), T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP))
}

/// Binary cross-entropy with real target `1 - smoothing` and fake target 0,
/// each averaged over patches and batch.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var, smoothing: f64) -> Result<Var> {
    let real = bce(tape, d_real, 1.0 - smoothing);
    let fake = bce(tape, d_fake, 0.0);
    tape.add(real, fake)
}

/// `-mean(log d_fake)`.
pub fn adversarial_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Var {
    bce(tape, d_fake, 1.0)
}

/// Mean over layers of the per-element mean absolute difference.
pub fn feature_matching_loss<T: Real>(tape: &mut Tape<T>, f_real: &[Var], f_fake: &[Var]) -> Result<Var> {
    if f_real.len() != f_fake.len() || f_real.is_empty() {
        return Err(Error::Shape(format!(
            "feature matching needs equally many layers, got {} and {}",
            f_real.len(),
            f_fake.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in f_real.iter().zip(f_fake) {
        let term = tape.mean_abs_diff(a, b)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), T::of(1.0 / f_real.len() as f64)))
}

/// Per-element mean absolute value of the ungated refiner output.
pub fn l1_penalty<T: Real>(tape: &mut Tape<T>, x_v: Var) -> Result<Var> {
    let zero = tape.constant(Tensor::zeros(tape.shape(x_v).to_vec()));
    tape.mean_abs_diff(x_v, zero)
}

/// The four refinement loss terms, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct RefinerParts {
    pub adv: Var,
    pub feat: Var,
    pub vgg: Var,
    pub pen: Var,
}

impl RefinerParts {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> PartValues {
        PartValues {
            adv: tape.item(self.adv).f64(),
            feat: tape.item(self.feat).f64(),
            vgg: tape.item(self.vgg).f64(),
            pen: tape.item(self.pen).f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartValues {
    pub adv: f64,
    pub feat: f64,
    pub vgg: f64,
    pub pen: f64,
}

/// Normalizers of the total refinement loss. Created once by [`calibrate`]
/// and never changed afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCalibration {
    pub m: f64,
    pub n: f64,
    pub o: f64,
    pub alpha: f64,
    pub frozen: bool,
}

impl LossCalibration {
    /// Weights `(1/(2M), 1/(2N), 1/O, alpha)` of the four parts.
    pub fn weights(&self) -> [f64; 4] {
        [0.5 / self.m, 0.5 / self.n, 1.0 / self.o, self.alpha]
    }

    pub fn total(&self, parts: &PartValues) -> Result<f64> {
        self.check_frozen()?;
        let [a, b, c, d] = self.weights();
        Ok(a * parts.adv + b * parts.feat + c * parts.vgg + d * parts.pen)
    }

    fn check_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::Contract("total refiner loss needs a frozen calibration".into()));
        }
        Ok(())
    }
}

/// Sets `M, N, O` to the first-iteration losses and `alpha = 0.1 / pen`.
/// A slot that already holds a calibration cannot be calibrated again.
pub fn calibrate(slot: &mut Option<LossCalibration>, first: &PartValues) -> Result<LossCalibration> {
    if let Some(c) = slot {
        if c.frozen {
            return Err(Error::Calibration("calibration is frozen and cannot be set again".into()));
        }
    }
    for (name, v) in [("adversarial", first.adv), ("feature matching", first.feat), ("perceptual", first.vgg), ("penalty", first.pen)] {
        if !(v > 1e-12) || !v.is_finite() {
            return Err(Error::Calibration(format!(
                "first-iteration {name} loss is {v:e}; rerun with a different --seed"
            )));
        }
    }
    let c = LossCalibration { m: first.adv, n: first.feat, o: first.vgg, alpha: 0.1 / first.pen, frozen: true };
    *slot = Some(c);
    Ok(c)
}

/// `(adv/M + feat/N)/2 + vgg/O + alpha*pen` on the tape.
pub fn total_refiner_loss<T: Real>(tape: &mut Tape<T>, parts: &RefinerParts, calib: &LossCalibration) -> Result<Var> {
    calib.check_frozen()?;
    let [a, b, c, d] = calib.weights();
    let terms = [
        tape.scale(parts.adv, T::of(a)),
        tape.scale(parts.feat, T::of(b)),
        tape.scale(parts.vgg, T::of(c)),
        tape.scale(parts.pen, T::of(d)),
    ];
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Store of past generated images mixed into discriminator batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    pub capacity: usize,
    pub p: f64,
    /// Resident images, each `[C, H, W]` flattened, with a shared shape.
    items: Vec<Vec<T>>,
    item_shape: Vec<usize>,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn new(capacity: usize, p: f64) -> Result<Self> {
        if capacity == 0 || !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("replay buffer needs capacity > 0 and p in [0, 1], got {capacity}, {p}")));
        }
        Ok(Self { capacity, p, items: Vec::new(), item_shape: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Builds the discriminator batch for `fresh` (`[B, C, H, W]`) and stores
    /// the fresh images. Returns the batch and how many slots came from the
    /// buffer.
    ///
    /// Each slot is replaced, with probability `p`, by a uniformly chosen
    /// image resident before this call; the fresh images are then pushed,
    /// evicting uniformly random residents once full.
    pub fn push_sample<R: Rng + ?Sized>(&mut self, fresh: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, usize)> {
        let b = fresh.shape()[0];
        let shape = fresh.shape()[1..].to_vec();
        if !self.items.is_empty() && shape != self.item_shape {
            return Err(Error::Shape(format!("replay buffer holds {:?} images, got {:?}", self.item_shape, shape)));
        }
        let per = fresh.numel() / b;
        let mut out = fresh.clone();
        let mut drawn = 0;
        let resident = self.items.len();
        for slot in 0..b {
            if resident > 0 && rng.random::<f64>() < self.p {
                let pick = rng.random_range(0..resident);
                out.data_mut()[slot * per..(slot + 1) * per].copy_from_slice(&self.items[pick]);
                drawn += 1;
            }
        }
        self.item_shape = shape;
        for slot in 0..b {
            let img = fresh.data()[slot * per..(slot + 1) * per].to_vec();
            if self.items.len() < self.capacity {
                self.items.push(img);
            } else {
                let evict = rng.random_range(0..self.capacity);
                self.items[evict] = img;
            }
        }
        Ok((out, drawn))
    }
}
