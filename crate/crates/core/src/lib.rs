//! Single-image reflection removal.
//!
//! The crate covers the whole pipeline:
//!
//! - [`imgcore`]: RGB images in linear or gamma-encoded form, resampling, PNG I/O and PSNR.
//! - [`synthesis`]: physically based mixture synthesis (defocus blur, double
//!   reflection, sensor noise) and reproducible dataset generation.
//! - [`nn`]: a small reverse-mode differentiable tensor stack with stride-1
//!   convolution and transposed convolution, Adam, and a finite-difference checker.
//! - [`model`]: the three-stage encoder-decoder with its residual subtraction
//!   junction, plus checkpoints.
//! - [`loss`]: pixel L2, layer-normalized perceptual loss and their combination.
//! - [`trainer`]: mini-batch training and PSNR evaluation.

pub mod error;
pub mod imgcore;
pub mod loss;
pub mod model;
pub mod nn;
pub mod synthesis;
pub mod trainer;

mod fsutil;

pub use error::{CheckpointError, Error, Result};
