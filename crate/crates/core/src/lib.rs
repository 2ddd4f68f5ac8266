//! Edge- and text-conditioned diffusion augmentation for segmentation.

pub mod augmentation;
pub mod conditioning;
pub mod container;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod segmentation;

pub use error::{Error, Result};
