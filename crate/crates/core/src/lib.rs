//! Core of a multi-grained text-guided image fusion pipeline.
//!
//! Everything here is pure computation over in-memory buffers: image
//! primitives, a small reverse-mode autodiff tape, the fusion network, the
//! training objective, the evaluation metrics, saliency-driven enrichment and
//! the optimizer. File formats, the CLI and the training driver live in the
//! `mtif` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod config;
pub mod enrich;
pub mod error;
pub mod fusenet;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod real;
pub mod text;
pub mod train;

pub use config::{Ablation, Config, LossWeights, Task, TgvmMode, VeMode};
pub use error::{Error, Result};
pub use image::{ColorSpace, Image, ImagePair};
pub use real::Real;
