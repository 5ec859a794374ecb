//! Toy multi-track 1D U-Net noise predictor.
//!
//! The `K` tracks are concatenated along channels, pass through a stem
//! convolution, `depth` down blocks, a mid block with single-head attention
//! over frames, and `depth` up blocks with skip connections. Every block is
//! modulated by a conditioning vector built from per-track timestep
//! embeddings and a mean-pooled prompt embedding.

mod checkpoint;
mod gradcheck;
mod network;
mod params;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, GradcheckReport};
pub use network::{sinusoid, ForwardPass};
pub use params::{Parameter, ParameterSet};

use crate::diffusion::{LatentShape, NoisePredictor, TimestepVector, TrackLatents};
use crate::error::{Error, Result};
use crate::prompt::PromptTokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub tracks: usize,
    pub latent_channels: usize,
    pub frames: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub timestep_embed_dim: usize,
    pub prompt_vocab_size: usize,
    pub prompt_embed_dim: usize,
    pub cond_mlp_width: usize,
}

impl DenoiserConfig {
    /// Small enough that every parameter can be checked by finite differences.
    pub fn micro() -> Self {
        Self {
            tracks: 2,
            latent_channels: 2,
            frames: 16,
            hidden_width: 4,
            depth: 2,
            timestep_embed_dim: 4,
            prompt_vocab_size: 8,
            prompt_embed_dim: 4,
            cond_mlp_width: 8,
        }
    }

    /// Defaults used for the desk-scale runs, given the latent layout and vocabulary.
    pub fn desk(latent: LatentShape, prompt_vocab_size: usize) -> Self {
        Self {
            tracks: latent.tracks,
            latent_channels: latent.channels,
            frames: latent.frames,
            hidden_width: 32,
            depth: 2,
            timestep_embed_dim: 16,
            prompt_vocab_size,
            prompt_embed_dim: 16,
            cond_mlp_width: 64,
        }
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(self.tracks, self.latent_channels, self.frames)
    }

    /// Group count for normalization: 8, or `H` when `H < 8`.
    pub fn groups(&self) -> usize {
        self.hidden_width.min(8)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("tracks", self.tracks),
            ("latent_channels", self.latent_channels),
            ("frames", self.frames),
            ("hidden_width", self.hidden_width),
            ("timestep_embed_dim", self.timestep_embed_dim),
            ("prompt_vocab_size", self.prompt_vocab_size),
            ("prompt_embed_dim", self.prompt_embed_dim),
            ("cond_mlp_width", self.cond_mlp_width),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.tracks > crate::diffusion::TrackSet::MAX_TRACKS {
            return Err(Error::InvalidConfig(format!("at most {} tracks", crate::diffusion::TrackSet::MAX_TRACKS)));
        }
        if self.depth >= usize::BITS as usize || !self.frames.is_multiple_of(1usize << self.depth) {
            return Err(Error::InvalidConfig(format!(
                "frames {} not divisible by 2^{}",
                self.frames, self.depth
            )));
        }
        if !self.timestep_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("timestep_embed_dim must be even".into()));
        }
        if !self.hidden_width.is_multiple_of(self.groups()) {
            return Err(Error::InvalidConfig(format!(
                "hidden_width {} not divisible into {} groups",
                self.hidden_width,
                self.groups()
            )));
        }
        Ok(())
    }

    /// Total scalar parameter count implied by the config.
    pub fn parameter_count(&self) -> usize {
        params::layout(self).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Fan-in scaled normal weights, `N(0, 0.02²)` embeddings, unit norm gains,
/// zero biases and a zero output convolution.
pub fn init_params<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<ParameterSet> {
    config.validate()?;
    Ok(ParameterSet::from_layout(params::layout(config), rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParameterSet,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: DenoiserConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let expected = ParameterSet::from_layout(params::layout(&config), &mut crate::rng::seeded(0));
        expected.check_layout(&params)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    /// Same architecture, different weights (for example an EMA copy).
    pub fn with_params(&self, params: ParameterSet) -> Result<Self> {
        Self::from_parameters(self.config, params)
    }

    pub fn embed_timesteps(&self, tvec: &TimestepVector) -> Result<Vec<f64>> {
        network::embed_timesteps(&self.config, &self.params, tvec)
    }

    pub fn forward(&self, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> Result<TrackLatents> {
        Ok(self.forward_pass(z, tvec, prompt)?.into_prediction())
    }

    /// Forward evaluation that keeps its graph for a later [`ForwardPass::backward`].
    pub fn forward_pass(&self, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> Result<ForwardPass> {
        network::forward_pass(&self.config, &self.params, z, tvec, prompt)
    }

    pub fn backward(
        &self,
        z: &TrackLatents,
        tvec: &TimestepVector,
        prompt: &PromptTokens,
        loss_grad: &TrackLatents,
    ) -> Result<ParameterSet> {
        self.forward_pass(z, tvec, prompt)?.backward(&self.params, loss_grad)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::new(self.clone()).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Checkpoint::load(path)?.model)
    }
}

impl NoisePredictor for Denoiser {
    fn latent_shape(&self) -> LatentShape {
        self.config.latent_shape()
    }

    fn predict(&self, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> Result<TrackLatents> {
        self.forward(z, tvec, prompt)
    }
}

#[cfg(test)]
mod tests;
