//! Toy diffusion laboratory with FreeU decoder-feature modulation.
//!
//! The crate bundles a small reverse-mode autodiff engine, a time-conditional
//! U-Net whose decoder concatenation sites can be intercepted, DDPM training and
//! ancestral sampling, the FreeU backbone/skip re-weighting, and the spectral
//! instruments used to measure its effect.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod freeu;
mod kernels;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod spectral;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
