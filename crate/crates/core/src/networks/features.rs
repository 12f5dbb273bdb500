use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conv, leaky, Builder};
use crate::checkpoint::{check_compatible, Checkpoint};
use crate::error::{Error, Result};
use crate::kspace::ComplexImage;
use crate::tensor::init::InitScheme;
use crate::tensor::{Binder, ParamSet, Real, Tape, Tensor, Var};

pub const FEATURES_KIND: &str = "features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    /// Orthogonal filters drawn from a fixed seed.
    Seeded { seed: u64 },
    /// A checkpoint directory of kind `features` with matching shapes.
    File { path: PathBuf },
}

/// Frozen convolutional feature extractor for the perceptual loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub source: FeatureSource,
    /// The magnitude image is repeated to this many input channels.
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub slope: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            source: FeatureSource::Seeded { seed: 0x5eed },
            in_channels: 3,
            widths: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
            slope: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    cfg: FeatureConfig,
    params: ParamSet<T>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.kernel < cfg.stride || cfg.in_channels == 0 {
            return Err(Error::Config(format!("invalid feature extractor configuration {cfg:?}")));
        }
        let seed = match &cfg.source {
            FeatureSource::Seeded { seed } => *seed,
            FeatureSource::File { .. } => 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng, InitScheme::Orthogonal);
        let mut prev = cfg.in_channels;
        for (i, &c) in cfg.widths.iter().enumerate() {
            b.conv(&format!("conv{i}"), c, prev, cfg.kernel);
            prev = c;
        }
        let mut params = b.finish();
        if let FeatureSource::File { path } = &cfg.source {
            let ck = Checkpoint::<T>::load_kind(path, FEATURES_KIND)?;
            check_compatible(&params, &ck.params, path)?;
            params = ck.params;
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Features of a 2-channel batch, computed from its magnitude. The
    /// parameters enter the tape as constants; gradients reach `x` only.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mag = tape.magnitude(x)?;
        let mut y = tape.repeat_channels(mag, self.cfg.in_channels)?;
        let mut binder = Binder::frozen(&self.params);
        // Asymmetric padding gives ceil(n / stride) outputs for any n.
        let total = self.cfg.kernel - self.cfg.stride;
        for i in 0..self.cfg.widths.len() {
            let [_, _, h, w] = *tape.shape(y) else { unreachable!("4-d by construction") };
            let extra = |n: usize| (self.cfg.stride - (n + total - self.cfg.kernel) % self.cfg.stride) % self.cfg.stride;
            let (top, left) = (total.div_ceil(2), total.div_ceil(2));
            let (bottom, right) = (total / 2 + extra(h), total / 2 + extra(w));
            if top + bottom + left + right > 0 {
                y = tape.zero_pad(y, [top, bottom, left, right])?;
            }
            y = conv(tape, &mut binder, &format!("conv{i}"), y, self.cfg.stride, 0)?;
            y = leaky(tape, y, self.cfg.slope);
        }
        Ok(y)
    }

    pub fn extract(&self, img: &ComplexImage) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(ComplexImage::batch(&[img])?);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}
