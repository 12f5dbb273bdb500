use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{conv, leaky, Builder};
use crate::error::{Error, Result};
use crate::tensor::init::InitScheme;
use crate::tensor::{Activation, Binder, ParamSet, Real, Tape, Var};

/// Patch discriminator: stride-2 convolutions with leaky ReLU, channelwise
/// dropout on the last `dropout_layers` of them, and a 1-channel sigmoid head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub slope: f64,
    pub dropout: f64,
    pub dropout_layers: usize,
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        Self { filters: vec![64, 128, 256, 512, 1024, 1024], ..Self::desk() }
    }

    pub fn desk() -> Self {
        Self { filters: vec![32, 64, 128], kernel: 4, stride: 2, slope: 0.2, dropout: 0.25, dropout_layers: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("discriminator needs at least one layer of positive width".into()));
        }
        if self.kernel < self.stride || (self.kernel - self.stride) % 2 != 0 {
            return Err(Error::Config(format!(
                "discriminator kernel {} and stride {} do not allow symmetric padding",
                self.kernel, self.stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Weights from N(0, 0.02), zero biases.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut b = Builder::new(rng, InitScheme::Gaussian { mean: 0.0, std: 0.02 });
        let mut prev = 2;
        for (i, &c) in self.filters.iter().enumerate() {
            b.conv(&format!("conv{i}"), c, prev, self.kernel);
            prev = c;
        }
        b.conv("head", 1, prev, 3);
        Ok(b.finish())
    }

    /// `dropout_rng` of `None` runs in eval mode (no dropout).
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        x: Var,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<DiscriminatorOutput> {
        let pad = (self.kernel - self.stride) / 2;
        let first_dropout = self.filters.len().saturating_sub(self.dropout_layers);
        let mut features = Vec::with_capacity(self.filters.len());
        let mut y = x;
        for i in 0..self.filters.len() {
            let [_, _, h, w] = *tape.shape(y) else { unreachable!("conv outputs are 4-d") };
            if h + 2 * pad < self.kernel || w + 2 * pad < self.kernel {
                return Err(Error::Config(format!(
                    "discriminator input {:?} is smaller than the receptive field of layer {i}",
                    tape.shape(x)
                )));
            }
            y = conv(tape, binder, &format!("conv{i}"), y, self.stride, pad)?;
            y = leaky(tape, y, self.slope);
            features.push(y);
            if i >= first_dropout {
                y = tape.channel_dropout(y, self.dropout, dropout_rng.as_deref_mut())?;
            }
        }
        let logits = conv(tape, binder, "head", y, 1, 1)?;
        let prob = tape.activation(logits, Activation::Sigmoid);
        Ok(DiscriminatorOutput { prob, features })
    }
}

/// Patch probabilities `[B, 1, h, w]` and post-activation feature maps, one
/// per filter layer.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub prob: Var,
    pub features: Vec<Var>,
}

impl DiscriminatorOutput {
    /// Spatial mean of the patch map per image.
    pub fn mean_prob<T: Real>(&self, tape: &Tape<T>) -> Vec<f64> {
        let p = tape.value(self.prob);
        let n = p.shape()[0];
        let per = p.numel() / n;
        p.data().chunks(per).map(|c| c.iter().map(|v| v.f64()).sum::<f64>() / per as f64).collect()
    }
}
