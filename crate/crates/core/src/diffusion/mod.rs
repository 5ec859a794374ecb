//! The diffusion kernel: schedules, the forward process, reverse-step means,
//! per-track timestep vectors, guidance and the multi-track sampler.

mod latents;
mod ops;
mod sampler;
mod schedule;

pub use latents::{LatentShape, NonTargetMode, TaskSpec, TimestepVector, TrackLatents, TrackSet};
pub use ops::{assemble_input, cfg_combine, forward_diffuse, posterior_mean};
pub use sampler::{sample, MarginalNoisePolicy, NoisePredictor, SamplerConfig, VarianceChoice};
pub use schedule::{NoiseSchedule, ScheduleKind};
