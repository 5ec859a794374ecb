//! Run configuration files: one `section.key = value` pair per line, `#`
//! starts a comment. Lists are comma-separated.
//!
//! ```text
//! train.preset = desk
//! train.epochs = 40
//! dataset.f0_buckets = 109.375, 125, 140.625, 156.25
//! sampler.lambda = 7
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CodecKind, DatasetConfig};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{MarginalNoisePolicy, NoiseSchedule, SamplerConfig, VarianceChoice};
use crate::error::{Error, Result};
use crate::train::{CurriculumConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Preset {
    /// Learning rate 1e-3, batch 8.
    #[default]
    Desk,
    /// Learning rate 3e-5, batch 12.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

/// Denoiser sizes not implied by the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub hidden_width: usize,
    pub depth: usize,
    pub timestep_embed_dim: usize,
    pub prompt_embed_dim: usize,
    pub cond_mlp_width: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            depth: 2,
            timestep_embed_dim: 16,
            prompt_embed_dim: 16,
            cond_mlp_width: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }
}

/// Curriculum settings; the epoch count comes from the training section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSettings {
    pub phase_boundaries: (f64, f64),
    pub p1: f64,
    pub p2: f64,
    pub bootstrap_start_fraction: f64,
    pub ema_decay: f64,
}

/// Bootstrap start used by default. Teacher sampling costs about twenty
/// times a plain epoch on one core, so desk runs only bootstrap the last few.
pub const DESK_BOOTSTRAP_START: f64 = 0.95;

impl Default for CurriculumSettings {
    fn default() -> Self {
        let c = CurriculumConfig::new(1, 1);
        Self {
            phase_boundaries: c.phase_boundaries,
            p1: c.p1,
            p2: c.p2,
            bootstrap_start_fraction: DESK_BOOTSTRAP_START,
            ema_decay: c.ema_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub dataset: DatasetConfig,
    pub model: ModelSize,
    pub train: TrainConfig,
    pub curriculum: CurriculumSettings,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    /// Seed for model initialization.
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            dataset: DatasetConfig::default(),
            model: ModelSize::default(),
            train: TrainConfig::desk(),
            curriculum: CurriculumSettings::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            init_seed: 0,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{raw}` for `{key}`")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|v| value(key, v)).collect()
}

/// Splits a config file into ordered `(key, value)` pairs, rejecting
/// duplicates and malformed lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
        }
        if let Some(first) = seen.insert(k.clone(), n + 1) {
            return Err(Error::InvalidConfig(format!("line {}: `{k}` already set on line {first}", n + 1)));
        }
        pairs.push((k, v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_preset(text, None)
    }

    /// Parses a config file. The training section starts from `preset` when
    /// given, else from the file's `train.preset`, else desk; explicit
    /// `train.*` keys then override it.
    pub fn parse_with_preset(text: &str, preset: Option<Preset>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let file_preset = pairs
            .iter()
            .find(|(k, _)| k == "train.preset")
            .map(|(_, v)| v.parse::<Preset>())
            .transpose()?;
        let preset = preset.or(file_preset).unwrap_or_default();
        let mut cfg = RunConfig {
            preset,
            train: preset.train_config(),
            ..RunConfig::default()
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.preset = preset;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, preset: Option<Preset>) -> Result<Self> {
        Self::parse_with_preset(&std::fs::read_to_string(path)?, preset)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let d = &mut self.dataset;
        let m = &mut self.model;
        let t = &mut self.train;
        let c = &mut self.curriculum;
        let s = &mut self.schedule;
        let p = &mut self.sampler;
        match key {
            "train.preset" => {}
            "dataset.sample_rate" => d.sample_rate = value(key, raw)?,
            "dataset.segment_length" => d.segment_length = value(key, raw)?,
            "dataset.num_samples" => d.num_samples = value(key, raw)?,
            "dataset.seed" => d.seed = value(key, raw)?,
            "dataset.f0_buckets" => d.f0_buckets = list(key, raw)?,
            "dataset.tempo_buckets" => d.tempo_buckets = list(key, raw)?,
            "dataset.motif_count" => d.motif_count = value(key, raw)?,
            "dataset.frame_size" => d.frame_size = value(key, raw)?,
            "dataset.codec" => d.codec_kind = raw.parse::<CodecKind>()?,
            "dataset.target_rms" => d.target_rms = value(key, raw)?,
            "dataset.latent_scale" => d.latent_scale = value(key, raw)?,
            "model.hidden_width" => m.hidden_width = value(key, raw)?,
            "model.depth" => m.depth = value(key, raw)?,
            "model.timestep_embed_dim" => m.timestep_embed_dim = value(key, raw)?,
            "model.prompt_embed_dim" => m.prompt_embed_dim = value(key, raw)?,
            "model.cond_mlp_width" => m.cond_mlp_width = value(key, raw)?,
            "model.init_seed" => self.init_seed = value(key, raw)?,
            "train.lr" => t.lr_start = value(key, raw)?,
            "train.batch_size" => t.batch_size = value(key, raw)?,
            "train.beta1" => t.beta1 = value(key, raw)?,
            "train.beta2" => t.beta2 = value(key, raw)?,
            "train.weight_decay" => t.weight_decay = value(key, raw)?,
            "train.eps" => t.eps = value(key, raw)?,
            "train.grad_clip" => t.grad_clip = value(key, raw)?,
            "train.epochs" => t.epochs = value(key, raw)?,
            "train.seed" => t.seed = value(key, raw)?,
            "train.prompt_dropout" => t.prompt_dropout = value(key, raw)?,
            "curriculum.phase_boundaries" => {
                let b: Vec<f64> = list(key, raw)?;
                if b.len() != 2 {
                    return Err(Error::InvalidConfig(format!("`{key}` takes two fractions")));
                }
                c.phase_boundaries = (b[0], b[1]);
            }
            "curriculum.p1" => c.p1 = value(key, raw)?,
            "curriculum.p2" => c.p2 = value(key, raw)?,
            "curriculum.bootstrap_start" => c.bootstrap_start_fraction = value(key, raw)?,
            "curriculum.ema_decay" => c.ema_decay = value(key, raw)?,
            "schedule.steps" => s.num_steps = value(key, raw)?,
            "schedule.beta_start" => s.beta_start = value(key, raw)?,
            "schedule.beta_end" => s.beta_end = value(key, raw)?,
            "sampler.lambda" => p.guidance_scale = value(key, raw)?,
            "sampler.seed" => p.seed = value(key, raw)?,
            "sampler.variance" => {
                p.variance = match raw {
                    "beta" => VarianceChoice::BetaT,
                    "beta_tilde" => VarianceChoice::BetaTilde,
                    _ => return Err(Error::InvalidConfig(format!("`{key}` is beta or beta_tilde"))),
                }
            }
            "sampler.marginal_noise" => {
                p.marginal_noise = match raw {
                    "fixed" => MarginalNoisePolicy::FixedDraw,
                    "resample" => MarginalNoisePolicy::ResamplePerStep,
                    _ => return Err(Error::InvalidConfig(format!("`{key}` is fixed or resample"))),
                }
            }
            "sampler.text_guidance" => {
                p.text_guidance = if raw == "off" { None } else { Some(value(key, raw)?) }
            }
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.curriculum_config().validate()?;
        self.denoiser_config().validate()?;
        self.schedule.build()?;
        self.sampler.validate()
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let m = self.model;
        DenoiserConfig {
            hidden_width: m.hidden_width,
            depth: m.depth,
            timestep_embed_dim: m.timestep_embed_dim,
            prompt_embed_dim: m.prompt_embed_dim,
            cond_mlp_width: m.cond_mlp_width,
            ..DenoiserConfig::desk(self.dataset.latent_shape(), self.dataset.vocab().size())
        }
    }

    pub fn curriculum_config(&self) -> CurriculumConfig {
        let c = self.curriculum;
        CurriculumConfig {
            phase_boundaries: c.phase_boundaries,
            p1: c.p1,
            p2: c.p2,
            bootstrap_start_fraction: c.bootstrap_start_fraction,
            ema_decay: c.ema_decay,
            ..CurriculumConfig::new(self.dataset.latent_shape().tracks, self.train.epochs)
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(", ");
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        let c = &self.curriculum;
        let s = &self.schedule;
        let p = &self.sampler;
        let codec = match d.codec_kind {
            CodecKind::IdentityFrames => "identity",
            CodecKind::OrthoLinear => "ortho",
        };
        let variance = match p.variance {
            VarianceChoice::BetaT => "beta",
            VarianceChoice::BetaTilde => "beta_tilde",
        };
        let marginal = match p.marginal_noise {
            MarginalNoisePolicy::FixedDraw => "fixed",
            MarginalNoisePolicy::ResamplePerStep => "resample",
        };
        let rows: Vec<(&str, String)> = vec![
            ("train.preset", self.preset.name().into()),
            ("dataset.sample_rate", d.sample_rate.to_string()),
            ("dataset.segment_length", d.segment_length.to_string()),
            ("dataset.num_samples", d.num_samples.to_string()),
            ("dataset.seed", d.seed.to_string()),
            ("dataset.f0_buckets", join(&d.f0_buckets.iter().map(f64::to_string).collect::<Vec<_>>())),
            ("dataset.tempo_buckets", join(&d.tempo_buckets.iter().map(usize::to_string).collect::<Vec<_>>())),
            ("dataset.motif_count", d.motif_count.to_string()),
            ("dataset.frame_size", d.frame_size.to_string()),
            ("dataset.codec", codec.into()),
            ("dataset.target_rms", d.target_rms.to_string()),
            ("dataset.latent_scale", d.latent_scale.to_string()),
            ("model.hidden_width", m.hidden_width.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.timestep_embed_dim", m.timestep_embed_dim.to_string()),
            ("model.prompt_embed_dim", m.prompt_embed_dim.to_string()),
            ("model.cond_mlp_width", m.cond_mlp_width.to_string()),
            ("model.init_seed", self.init_seed.to_string()),
            ("train.lr", t.lr_start.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.prompt_dropout", t.prompt_dropout.to_string()),
            ("curriculum.phase_boundaries", format!("{}, {}", c.phase_boundaries.0, c.phase_boundaries.1)),
            ("curriculum.p1", c.p1.to_string()),
            ("curriculum.p2", c.p2.to_string()),
            ("curriculum.bootstrap_start", c.bootstrap_start_fraction.to_string()),
            ("curriculum.ema_decay", c.ema_decay.to_string()),
            ("schedule.steps", s.num_steps.to_string()),
            ("schedule.beta_start", s.beta_start.to_string()),
            ("schedule.beta_end", s.beta_end.to_string()),
            ("sampler.lambda", p.guidance_scale.to_string()),
            ("sampler.seed", p.seed.to_string()),
            ("sampler.variance", variance.into()),
            ("sampler.marginal_noise", marginal.into()),
            ("sampler.text_guidance", p.text_guidance.map_or("off".into(), |w| w.to_string())),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk_defaults() {
        let c = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr_start, 1e-3);
        assert_eq!(c.schedule.num_steps, 100);
        assert_eq!(c.sampler.guidance_scale, 7.0);
    }

    #[test]
    fn preset_then_overrides() {
        let c = RunConfig::parse("train.epochs = 5\ntrain.preset = paper  # paper optimizer\n").unwrap();
        assert_eq!(c.train.lr_start, 3e-5);
        assert_eq!(c.train.batch_size, 12);
        assert_eq!(c.train.epochs, 5);
        let d = RunConfig::parse_with_preset("train.preset = paper\ntrain.batch_size = 4", Some(Preset::Desk)).unwrap();
        assert_eq!(d.train.lr_start, 1e-3);
        assert_eq!(d.train.batch_size, 4);
        assert_eq!(d.preset, Preset::Desk);
    }

    #[test]
    fn errors() {
        assert!(RunConfig::parse("train.epochs = 3\ntrain.epochs = 4").is_err());
        assert!(RunConfig::parse("train.nope = 1").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("train.epochs = many").is_err());
        assert!(RunConfig::parse("train.preset = huge").is_err());
        assert!(RunConfig::parse("curriculum.p1 = 1.5").is_err());
        assert!(RunConfig::parse("curriculum.phase_boundaries = 0.3").is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "dataset.codec = ortho\ndataset.f0_buckets = 100, 150.5\nsampler.variance = beta_tilde\n\
                    sampler.text_guidance = 2.5\ncurriculum.phase_boundaries = 0.2, 0.9\nmodel.hidden_width = 16\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.dataset.codec_kind, CodecKind::OrthoLinear);
        assert_eq!(c.curriculum_config().phase_boundaries, (0.2, 0.9));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn derived_configs_agree() {
        let c = RunConfig::default();
        let m = c.denoiser_config();
        assert_eq!(m.latent_shape(), c.dataset.latent_shape());
        assert_eq!(m.prompt_vocab_size, 27);
        assert_eq!(c.curriculum_config().total_epochs, c.train.epochs);
    }
}
