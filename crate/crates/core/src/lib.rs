//! Multi-track latent diffusion at desk scale.
//!
//! A single denoiser models marginal, conditional and joint distributions over
//! `K` stems by giving every track its own diffusion timestep. Tracks at
//! timestep `0` act as clean conditioning, tracks at `T` are pure noise, and
//! target tracks share one timestep while they are jointly denoised.
//!
//! Modules:
//! - [`diffusion`]: noise schedules, forward process, posterior mean, timestep
//!   vectors, classifier-free guidance and the multi-track reverse sampler.
//! - [`autograd`] and [`denoiser`]: a small 1D U-Net noise predictor with
//!   reverse-mode gradients.
//! - [`train`]: curriculum task allocation, masked loss, AdamW, EMA teacher and
//!   self-bootstrapping.
//! - [`data`]: synthetic stems, frame codec, loudness normalization and the
//!   dataset container.
//! - [`eval`]: dominant-frequency coherence, a Fréchet proxy distance and
//!   sampler audits.

pub mod autograd;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod prompt;
pub mod rng;
pub mod tensorfile;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
