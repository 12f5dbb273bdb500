//! Two-stage compressed-sensing MRI reconstruction: an MSE-trained unrolled
//! cascade with data-consistency layers, followed by a gated refinement
//! network trained with adversarial, feature-matching and perceptual losses.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kspace;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
