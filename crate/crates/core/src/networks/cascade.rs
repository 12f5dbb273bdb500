use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{conv, leaky, Builder};
use crate::error::{Error, Result};
use crate::kspace::{zero_fill, ComplexImage, KSpaceSample};
use crate::tensor::init::InitScheme;
use crate::tensor::{Binder, DcMode, ParamSet, Real, Tape, Var};

/// Unrolled de-aliasing cascade: `n_c` residual conv blocks of `n_d` layers,
/// each followed by a data-consistency layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub n_c: usize,
    pub n_d: usize,
    pub filters: usize,
    pub kernel: usize,
    /// Leaky-ReLU slope between the convolutions of a block.
    pub slope: f64,
    #[serde(default)]
    pub dc: DcMode,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { n_c: 3, n_d: 3, filters: 32, kernel: 3, slope: 0.1, dc: DcMode::Replace }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.n_d == 0 || self.filters == 0 {
            return Err(Error::Config("cascade n_c, n_d and filters must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("cascade kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    fn widths(&self, layer: usize) -> (usize, usize) {
        let inp = if layer == 0 { 2 } else { self.filters };
        let out = if layer + 1 == self.n_d { 2 } else { self.filters };
        (inp, out)
    }

    /// Conv weights from N(0, 0.02), zero biases.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut b = Builder::new(rng, InitScheme::Gaussian { mean: 0.0, std: 0.02 });
        for i in 0..self.n_c {
            for j in 0..self.n_d {
                let (inp, out) = self.widths(j);
                b.conv(&format!("block{i}.conv{j}"), out, inp, self.kernel);
            }
        }
        Ok(b.finish())
    }

    /// `x_u` is the zero-filled batch; `samples[b]` its acquisition.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        x_u: Var,
        samples: &[KSpaceSample],
    ) -> Result<Var> {
        let pad = self.kernel / 2;
        let mut x = x_u;
        for i in 0..self.n_c {
            let mut h = x;
            for j in 0..self.n_d {
                h = conv(tape, binder, &format!("block{i}.conv{j}"), h, 1, pad)?;
                if j + 1 < self.n_d {
                    h = leaky(tape, h, self.slope);
                }
            }
            let r = tape.add(h, x)?;
            x = tape.data_consistency(r, samples, self.dc)?;
        }
        Ok(x)
    }
}

/// Runs the cascade on a batch of acquisitions without recording gradients.
pub fn reconstruct<T: Real>(cfg: &CascadeConfig, params: &ParamSet<T>, samples: &[KSpaceSample]) -> Result<Vec<ComplexImage>> {
    let zf: Vec<ComplexImage> = samples.iter().map(zero_fill).collect();
    let refs: Vec<&ComplexImage> = zf.iter().collect();
    let mut tape = Tape::new();
    let x_u = tape.constant(ComplexImage::batch(&refs)?);
    let mut binder = Binder::frozen(params);
    let y = cfg.forward(&mut tape, &mut binder, x_u, samples)?;
    ComplexImage::unbatch(tape.value(y))
}
