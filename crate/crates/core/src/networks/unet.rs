use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{batch_norm, conv, conv_t, leaky, Builder, Mode};
use crate::error::{Error, Result};
use crate::tensor::init::InitScheme;
use crate::tensor::{Activation, Binder, ParamSet, Real, Tape, Tensor, Var};

/// Encoder-decoder with stride-2 convolutions and skip connections by
/// channel concatenation.
///
/// Encoder layer `i` halves the resolution; every layer but the first uses
/// batch norm. Decoder layer `j` doubles it and is concatenated with the
/// encoder output of matching resolution. A final transposed convolution
/// restores the input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub kernel: usize,
    pub slope: f64,
    pub output: Activation,
}

impl UNetConfig {
    /// Refinement network body: 2 -> 2 channels, tanh output.
    pub fn refiner() -> Self {
        Self {
            in_channels: 2,
            out_channels: 2,
            encoder: vec![32, 64, 128],
            decoder: vec![64, 32],
            kernel: 4,
            slope: 0.1,
            output: Activation::Tanh,
        }
    }

    /// Segmentation network: magnitude in, foreground probability out.
    pub fn segmenter() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            encoder: vec![16, 32, 64],
            decoder: vec![32, 16],
            kernel: 4,
            slope: 0.1,
            output: Activation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.len() + 1 != self.encoder.len() {
            return Err(Error::Config(format!(
                "u-net needs one decoder layer fewer than encoder layers, got {:?} / {:?}",
                self.encoder, self.decoder
            )));
        }
        if self.kernel < 2 || self.kernel % 2 != 0 {
            return Err(Error::Config(format!("u-net kernel must be even, got {}", self.kernel)));
        }
        if self.encoder.iter().chain(&self.decoder).any(|&c| c == 0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("u-net widths must be positive".into()));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        (self.kernel - 2) / 2
    }

    /// Input extents must be divisible by this.
    pub fn granularity(&self) -> usize {
        1 << self.encoder.len()
    }

    /// Orthogonal conv weights, zero biases, unit batch-norm scales.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut b = Builder::new(rng, InitScheme::Orthogonal);
        self.build(&mut b);
        Ok(b.finish())
    }

    pub(crate) fn build<T: Real, R: Rng + ?Sized>(&self, b: &mut Builder<'_, T, R>) {
        let k = self.kernel;
        let mut prev = self.in_channels;
        for (i, &c) in self.encoder.iter().enumerate() {
            b.conv(&format!("enc{i}"), c, prev, k);
            if i > 0 {
                b.batch_norm(&format!("enc{i}.bn"), c);
            }
            prev = c;
        }
        let depth = self.encoder.len();
        for (j, &c) in self.decoder.iter().enumerate() {
            b.conv_t(&format!("dec{j}"), prev, c, k);
            b.batch_norm(&format!("dec{j}.bn"), c);
            prev = c + self.encoder[depth - 2 - j];
        }
        b.conv_t("out", prev, self.out_channels, k);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let [_, c, h, w] = *tape.shape(x) else {
            return Err(Error::Shape(format!("u-net expects [B, C, H, W], got {:?}", tape.shape(x))));
        };
        let g = self.granularity();
        if c != self.in_channels || h % g != 0 || w % g != 0 {
            return Err(Error::Shape(format!(
                "u-net expects {} channels and extents divisible by {g}, got {:?}",
                self.in_channels,
                tape.shape(x)
            )));
        }
        let pad = self.pad();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut y = x;
        for i in 0..self.encoder.len() {
            y = conv(tape, binder, &format!("enc{i}"), y, 2, pad)?;
            if i > 0 {
                y = batch_norm(tape, binder, &format!("enc{i}.bn"), y, mode)?;
            }
            y = leaky(tape, y, self.slope);
            skips.push(y);
        }
        let depth = self.encoder.len();
        for j in 0..self.decoder.len() {
            y = conv_t(tape, binder, &format!("dec{j}"), y, 2, pad)?;
            y = batch_norm(tape, binder, &format!("dec{j}.bn"), y, mode)?;
            y = leaky(tape, y, self.slope);
            y = tape.concat_channels(y, skips[depth - 2 - j])?;
        }
        y = conv_t(tape, binder, "out", y, 2, pad)?;
        Ok(tape.activation(y, self.output))
    }
}

/// Foreground probabilities `[B, 1, H, W]` for magnitude images `[B, 1, H, W]`.
pub fn segment<T: Real>(cfg: &UNetConfig, params: &ParamSet<T>, magnitude: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(magnitude.clone());
    let mut binder = Binder::frozen(params);
    let y = cfg.forward(&mut tape, &mut binder, x, Mode::Eval)?;
    Ok(tape.value(y).clone())
}
