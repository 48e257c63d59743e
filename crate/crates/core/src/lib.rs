//! Conditional motion-sequence diffusion.
//!
//! A transformer denoiser trained with the clean-sample (x0) objective,
//! multi-condition classifier-free guidance, sliding-window generation with
//! overlap carry-over, a contrastive audio/pose alignment score and the
//! procedural world that supplies paired training data with known ground
//! truth.

pub mod archive;
pub mod capp;
pub mod autograd;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sequence;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod windowing;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
