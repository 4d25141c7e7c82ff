//! Targeted feature denoising for generalizable image super-resolution.
//!
//! Everything numeric lives here: a dense f64 tensor type with a reverse-mode
//! gradient tape, a differentiable 2D DFT, the eight-configuration degradation
//! pipeline, the gated frequency-spatial denoising network, tri-objective
//! training, PSNR/SSIM, and the spectral/feature analysis probes. The crate is
//! `no_std` + `alloc`; file formats, directories, and the CLI live in the
//! companion `tfd-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analyze;
pub mod autodiff;
pub mod checkpoint;
pub mod degrade;
mod error;
pub mod image;
mod kernels;
mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
