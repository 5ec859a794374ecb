use std::path::Path;

use super::{params, Denoiser, DenoiserConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::tensorfile::{self, NamedTensor};

const META: &str = "meta.denoiser";
const META_STEP: &str = "meta.step";
const MODEL: &str = "model.";
const EMA: &str = "ema.";

/// Model weights, the optional EMA copy, and the optimizer step reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub ema: Option<ParameterSet>,
    pub step: u64,
}

fn config_tensor(c: &DenoiserConfig) -> NamedTensor {
    let fields = [
        c.tracks,
        c.latent_channels,
        c.frames,
        c.hidden_width,
        c.depth,
        c.timestep_embed_dim,
        c.prompt_vocab_size,
        c.prompt_embed_dim,
        c.cond_mlp_width,
    ];
    NamedTensor::new(META, vec![fields.len()], fields.iter().map(|&v| v as f32).collect())
}

fn config_from(t: &NamedTensor) -> Result<DenoiserConfig> {
    let v: Vec<usize> = t
        .data
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 16_777_216.0 {
                Ok(x as usize)
            } else {
                Err(Error::Format(format!("bad config field {x}")))
            }
        })
        .collect::<Result<_>>()?;
    if v.len() != 9 {
        return Err(Error::Format(format!("config record has {} fields", v.len())));
    }
    let c = DenoiserConfig {
        tracks: v[0],
        latent_channels: v[1],
        frames: v[2],
        hidden_width: v[3],
        depth: v[4],
        timestep_embed_dim: v[5],
        prompt_vocab_size: v[6],
        prompt_embed_dim: v[7],
        cond_mlp_width: v[8],
    };
    c.validate()?;
    Ok(c)
}

/// Steps are split into two 24-bit halves so they survive the f32 encoding.
fn step_tensor(step: u64) -> NamedTensor {
    let lo = (step & 0xFF_FFFF) as f32;
    let hi = ((step >> 24) & 0xFF_FFFF) as f32;
    NamedTensor::new(META_STEP, vec![2], vec![lo, hi])
}

impl Checkpoint {
    pub fn new(model: Denoiser) -> Self {
        Self {
            model,
            ema: None,
            step: 0,
        }
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![config_tensor(self.model.config()), step_tensor(self.step)];
        out.extend(self.model.params().to_tensors(MODEL));
        if let Some(ema) = &self.ema {
            out.extend(ema.to_tensors(EMA));
        }
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|t| t.name == META)
            .ok_or_else(|| Error::Format("checkpoint has no denoiser config".into()))?;
        let config = config_from(meta)?;
        let mut params = ParameterSet::from_layout(params::layout(&config), &mut crate::rng::seeded(0));
        params.load_tensors(tensors, MODEL)?;
        let ema = if tensors.iter().any(|t| t.name.starts_with(EMA)) {
            let mut e = params.zeros_like();
            e.load_tensors(tensors, EMA)?;
            Some(e)
        } else {
            None
        };
        let step = match tensors.iter().find(|t| t.name == META_STEP) {
            Some(t) if t.data.len() == 2 => t.data[0] as u64 | ((t.data[1] as u64) << 24),
            Some(_) => return Err(Error::Format("bad step record".into())),
            None => 0,
        };
        Ok(Self {
            model: Denoiser::from_parameters(config, params)?,
            ema,
            step,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        tensorfile::encode(&self.to_tensors())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tensorfile::write(path, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&tensorfile::read(path)?)
    }

    /// The EMA weights when present, else the raw model.
    pub fn inference_model(&self) -> Result<Denoiser> {
        match &self.ema {
            Some(e) => self.model.with_params(e.clone()),
            None => Ok(self.model.clone()),
        }
    }
}
