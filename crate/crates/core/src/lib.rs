//! Reference-guided image completion with a dual-branch latent diffusion denoiser.
//!
//! A Reference branch encodes part-level reference images at timestep zero;
//! the Complete branch denoises a masked latent while its region-focused
//! attention layers attend to the masked reference tokens and its
//! decoupled cross-attention reads prompt and image semantic tokens.
//!
//! The crate also carries the training recipe, a procedural figure
//! generator, the benchmark format and evaluation harness, and masked-region
//! metrics. See the `examples/` directory for one program per capability.

pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod diffusion;
mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod training;
mod util;

pub use error::{Error, Result};
pub use mask::{Mask, MaskSpec};
pub use model::{FeatureCache, LatentGrid, Model, ModelConfig};
pub use raster::Raster;
pub use synth::{PartLabel, ReferencePart};
pub use util::{fnv1a64, sub_rng};
