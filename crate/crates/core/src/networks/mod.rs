//! The reconstruction cascade, refinement U-Net, patch discriminator, frozen
//! feature extractor and segmentation U-Net.
//!
//! Networks are plain configuration structs. `init` builds a [`ParamSet`]
//! and `forward` records a pass on a [`Tape`], binding parameters through a
//! [`Binder`]. All image tensors are `[B, C, H, W]`; complex images use two
//! channels (real, imaginary).

mod cascade;
mod discriminator;
mod features;
mod refiner;
mod unet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::init::{initialize, InitScheme};
use crate::tensor::{Activation, Binder, BnMode, ParamSet, Parameter, Real, Tape, Tensor, Var};

pub use cascade::{reconstruct, CascadeConfig};
pub use discriminator::{DiscriminatorConfig, DiscriminatorOutput};
pub use features::{FeatureConfig, FeatureExtractor, FeatureSource};
pub use refiner::{gate_output, unit_scaling, RefineOutput, RefinerConfig, GATE};
pub use unet::{segment, UNetConfig};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm uses batch statistics and dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(crate::Error::Config(format!("unknown preset '{other}' (expected paper or desk)"))),
        }
    }
}

/// Configuration of every network in the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: Preset,
    pub cascade: CascadeConfig,
    pub refiner: RefinerConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
    pub segmenter: UNetConfig,
}

impl Architecture {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            cascade: CascadeConfig::default(),
            refiner: RefinerConfig::default(),
            discriminator: match preset {
                Preset::Paper => DiscriminatorConfig::paper(),
                Preset::Desk => DiscriminatorConfig::desk(),
            },
            features: FeatureConfig::default(),
            segmenter: UNetConfig::segmenter(),
        }
    }
}

/// Collects freshly initialized parameters in a fixed creation order.
pub(crate) struct Builder<'r, T, R: ?Sized> {
    set: ParamSet<T>,
    rng: &'r mut R,
    weights: InitScheme,
}

impl<'r, T: Real, R: Rng + ?Sized> Builder<'r, T, R> {
    pub(crate) fn new(rng: &'r mut R, weights: InitScheme) -> Self {
        Self { set: ParamSet::new(), rng, weights }
    }

    fn add(&mut self, name: String, shape: Vec<usize>, scheme: InitScheme) {
        let mut p = Parameter::new(name, Tensor::zeros(shape));
        initialize(&mut p, scheme, self.rng);
        self.set.insert_parameter(p);
    }

    /// Convolution weight `[out, in, k, k]` and zero bias.
    pub(crate) fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) {
        self.add(format!("{name}.weight"), vec![out, inp, k, k], self.weights);
        self.add(format!("{name}.bias"), vec![out], InitScheme::Zeros);
    }

    /// Transposed-convolution weight `[in, out, k, k]` and zero bias.
    pub(crate) fn conv_t(&mut self, name: &str, inp: usize, out: usize, k: usize) {
        self.add(format!("{name}.weight"), vec![inp, out, k, k], self.weights);
        self.add(format!("{name}.bias"), vec![out], InitScheme::Zeros);
    }

    pub(crate) fn batch_norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.gamma"), vec![c], InitScheme::Scalar { value: 1.0 });
        self.add(format!("{name}.beta"), vec![c], InitScheme::Zeros);
        self.set.insert_buffer(format!("{name}.running_mean"), Tensor::zeros([c]));
        self.set.insert_buffer(format!("{name}.running_var"), Tensor::ones([c]));
    }

    pub(crate) fn scalar(&mut self, name: &str, value: f64) {
        self.add(name.to_string(), vec![1], InitScheme::Scalar { value });
    }

    pub(crate) fn finish(self) -> ParamSet<T> {
        self.set
    }
}

pub(crate) fn conv<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = binder.param(tape, &format!("{name}.weight"))?;
    let b = binder.param(tape, &format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

pub(crate) fn conv_t<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = binder.param(tape, &format!("{name}.weight"))?;
    let b = binder.param(tape, &format!("{name}.bias"))?;
    tape.conv_transpose2d(x, w, Some(b), stride, pad)
}

pub(crate) fn batch_norm<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    name: &str,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let gamma = binder.param(tape, &format!("{name}.gamma"))?;
    let beta = binder.param(tape, &format!("{name}.beta"))?;
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Train, BN_EPS)?;
            binder.record_stats(name, stats.expect("train mode yields statistics"));
            Ok(y)
        }
        Mode::Eval => {
            let mean = binder.buffer(&format!("{name}.running_mean"))?.data();
            let var = binder.buffer(&format!("{name}.running_var"))?.data();
            Ok(tape.batch_norm(x, gamma, beta, BnMode::Eval { mean, var }, BN_EPS)?.0)
        }
    }
}

pub(crate) fn leaky<T: Real>(tape: &mut Tape<T>, x: Var, slope: f64) -> Var {
    tape.activation(x, Activation::LeakyRelu { slope })
}
