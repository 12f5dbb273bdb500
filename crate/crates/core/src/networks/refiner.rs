use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Builder, Mode, UNetConfig};
use crate::error::Result;
use crate::tensor::init::InitScheme;
use crate::tensor::{Binder, ParamSet, Real, Tape, Tensor, Var};

pub const GATE: &str = "gate";

/// Refinement network `V`: a U-Net on the reconstruction rescaled to
/// `(-1, 1)`, added back through a trainable scalar gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub unet: UNetConfig,
    pub gate_init: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { unet: UNetConfig::refiner(), gate_init: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOutput {
    /// Gated, rescaled result.
    pub x_hat: Var,
    /// Raw U-Net output in unit scale, before gating.
    pub x_v: Var,
}

/// Per-image `(center, half_range)` of the affine map onto `[-1, 1]`, taken
/// over both channels jointly. A constant image has half range 0.
pub fn unit_scaling<T: Real>(x: &Tensor<T>) -> Vec<(T, T)> {
    let n = x.shape()[0];
    let per = x.numel() / n;
    (0..n)
        .map(|i| {
            let s = &x.data()[i * per..(i + 1) * per];
            let lo = s.iter().copied().fold(T::infinity(), T::min);
            let hi = s.iter().copied().fold(T::neg_infinity(), T::max);
            let two = T::of(2.0);
            ((hi + lo) / two, (hi - lo) / two)
        })
        .collect()
}

/// `x_rec + h * gate * x_v` per image, i.e. the unit-scale sum `s + gate * x_v`
/// mapped back through the inverse affine map. Written in this form so that
/// a zero gate returns `x_rec` exactly.
pub fn gate_output<T: Real>(tape: &mut Tape<T>, x_rec: Var, x_v: Var, gate: Var, half_ranges: Vec<T>) -> Result<Var> {
    let back = tape.sample_scale(x_v, half_ranges)?;
    let gated = tape.scale_by(back, gate)?;
    tape.add(x_rec, gated)
}

impl RefinerConfig {
    /// Orthogonal U-Net weights and the gate at `gate_init`.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        self.unet.validate()?;
        let mut b = Builder::new(rng, InitScheme::Orthogonal);
        self.unet.build(&mut b);
        b.scalar(GATE, self.gate_init);
        Ok(b.finish())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, x_rec: Var, mode: Mode) -> Result<RefineOutput> {
        let scaling = unit_scaling(tape.value(x_rec));
        let inv: Vec<T> = scaling.iter().map(|&(_, h)| if h > T::zero() { T::one() / h } else { T::zero() }).collect();
        let per = tape.value(x_rec).numel() / scaling.len();
        let shift = Tensor::from_fn(tape.shape(x_rec).to_vec(), |i| {
            let (c, _) = scaling[i / per];
            c * inv[i / per]
        });
        let scaled = tape.sample_scale(x_rec, inv)?;
        let shift = tape.constant(shift);
        let s = tape.sub(scaled, shift)?;
        let x_v = self.unet.forward(tape, binder, s, mode)?;
        let gate = binder.param(tape, GATE)?;
        let x_hat = gate_output(tape, x_rec, x_v, gate, scaling.iter().map(|&(_, h)| h).collect())?;
        Ok(RefineOutput { x_hat, x_v })
    }
}
