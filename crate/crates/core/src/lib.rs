//! Multi-agent trajectory prediction with a transformer encoder-decoder,
//! discrete latent intentions, and a rasterized map context.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense f64 autodiff tensors and the parameter store
//! - [`nn`]: attention, transformer blocks, and layer primitives
//! - [`scene`]: synthetic driving scenes and their on-disk format
//! - [`encoder`], [`map_encoder`], [`latent`], [`decoder`]: model stages
//! - [`model`]: the assembled predictor and its variants
//! - [`train`]: expectation-maximization training loop
//! - [`metrics`]: displacement-error evaluation
//! - [`render`]: SVG scene rendering
//! - [`oracle`]: independent naive reference implementations for self-checks

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod latent;
pub mod map_encoder;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod render;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
