//! Compressed latent diffusion toolkit: pruned U-Net construction,
//! teacher-student distillation, latent replay for class-sequential
//! training, generative metrics and compute profiling.

pub mod autograd;
pub mod binio;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod profiler;
pub mod replay;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
