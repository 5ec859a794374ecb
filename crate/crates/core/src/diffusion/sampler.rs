use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::latents::{LatentShape, TaskSpec, TimestepVector, TrackLatents};
use crate::diffusion::ops::{cfg_combine, posterior_mean};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{shape_mismatch, Error, Result};
use crate::prompt::PromptTokens;
use crate::rng::{fill_gaussian, seeded, StemRng};

/// Anything that predicts the noise in a multi-track latent block.
///
/// Implementations must be read-only snapshots: `predict` takes `&self` and
/// may be called from several threads at once.
pub trait NoisePredictor: Sync {
    fn latent_shape(&self) -> LatentShape;

    fn predict(&self, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> Result<TrackLatents>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn latent_shape(&self) -> LatentShape {
        (**self).latent_shape()
    }

    fn predict(&self, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> Result<TrackLatents> {
        (**self).predict(z, tvec, prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceChoice {
    /// `σ_t² = β_t`
    #[default]
    BetaT,
    /// `σ_t² = β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`
    BetaTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MarginalNoisePolicy {
    /// Non-target noise for the marginal branch is drawn once per trajectory.
    #[default]
    FixedDraw,
    /// A fresh draw at every reverse step.
    ResamplePerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Track-level guidance scale `λ`.
    pub guidance_scale: f64,
    pub variance: VarianceChoice,
    pub marginal_noise: MarginalNoisePolicy,
    pub seed: u64,
    /// Optional prompt-level guidance scale for joint generation, combining a
    /// null-prompt branch with the prompted one. Off by default.
    pub text_guidance: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.0,
            variance: VarianceChoice::BetaT,
            marginal_noise: MarginalNoisePolicy::FixedDraw,
            seed: 0,
            text_guidance: None,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn rng(&self) -> StemRng {
        seeded(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "guidance scale must be finite and >= 0 (got {})",
                self.guidance_scale
            )));
        }
        if let Some(w) = self.text_guidance {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidConfig(format!("text guidance must be finite and >= 0 (got {w})")));
            }
        }
        Ok(())
    }

    fn sigma(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self.variance {
            VarianceChoice::BetaT => schedule.beta(t).sqrt(),
            VarianceChoice::BetaTilde => schedule.posterior_variance(t).sqrt(),
        }
    }
}

fn check_locked(task: &TaskSpec, shape: LatentShape, locked: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
    for i in task.conditional().iter() {
        match locked.get(&i) {
            None => return Err(Error::MissingLocked(i)),
            Some(z) if z.len() != shape.track_len() => {
                return Err(shape_mismatch(
                    format!("{} values for locked track {i}", shape.track_len()),
                    z.len(),
                ))
            }
            Some(z) if !z.iter().all(|v| v.is_finite()) => {
                return Err(Error::NonFinite(format!("locked track {i}")));
            }
            _ => {}
        }
    }
    if let Some(extra) = locked.keys().find(|&&i| !task.conditional().contains(i)) {
        return Err(Error::InvalidTask(format!(
            "locked latent supplied for track {extra}, which is not conditional"
        )));
    }
    Ok(())
}

/// Multi-track ancestral sampling.
///
/// Target tracks start from standard Gaussian noise and are denoised together
/// from `t = T` down to `1`. When some tracks are not targets, every step runs a
/// conditional branch (conditional tracks clean at timestep `0`) and a
/// marginal branch (all non-targets pure noise at timestep `T`), combined with
/// [`cfg_combine`]. Only target channels are ever written.
///
/// The generator is consumed in a fixed order: one `K×D×S′` block for the
/// initial targets, one block of marginal noise when `|targets| < K`, then per
/// step a resampled marginal block (under [`MarginalNoisePolicy::ResamplePerStep`],
/// `t < T`) followed by reverse-step noise for each target track in index order.
pub fn sample<P, R>(
    denoiser: &P,
    task: &TaskSpec,
    locked: &BTreeMap<usize, Vec<f64>>,
    prompt: &PromptTokens,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrackLatents>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let shape = denoiser.latent_shape();
    if task.tracks() != shape.tracks {
        return Err(shape_mismatch(
            format!("{} tracks", shape.tracks),
            format!("task over {} tracks", task.tracks()),
        ));
    }
    check_locked(task, shape, locked)?;

    let big_t = schedule.num_steps();
    let targets = task.targets();
    let initial = TrackLatents::gaussian(shape, rng);
    let mut marginal_noise = if task.is_joint() {
        None
    } else {
        Some(TrackLatents::gaussian(shape, rng))
    };

    let mut z = TrackLatents::zeros(shape);
    for i in 0..shape.tracks {
        let src = if targets.contains(i) {
            initial.track(i)
        } else if let Some(l) = locked.get(&i) {
            l.as_slice()
        } else {
            marginal_noise.as_ref().expect("non-joint task has marginal noise").track(i)
        };
        z.track_mut(i).copy_from_slice(src);
    }

    let marginal_task = TaskSpec::new(shape.tracks, targets, crate::diffusion::TrackSet::empty())?;
    let mut step_noise = vec![0.0; shape.track_len()];
    for t in (1..=big_t).rev() {
        let eps = match marginal_noise.as_mut() {
            None => {
                let tvec = TimestepVector::for_task(task, t, big_t)?;
                let cond = checked_predict(denoiser, &z, &tvec, prompt, shape)?;
                match cfg.text_guidance {
                    Some(w) => {
                        let null = checked_predict(denoiser, &z, &tvec, &prompt.to_null(), shape)?;
                        TrackLatents::from_vec(shape, cfg_combine(null.data(), cond.data(), w)?)?
                    }
                    None => cond,
                }
            }
            Some(noise) => {
                if cfg.marginal_noise == MarginalNoisePolicy::ResamplePerStep && t < big_t {
                    fill_gaussian(rng, noise.data_mut());
                }
                let mut zc = z.clone();
                let mut zm = z.clone();
                for i in 0..shape.tracks {
                    if targets.contains(i) {
                        continue;
                    }
                    if !task.conditional().contains(i) {
                        zc.track_mut(i).copy_from_slice(noise.track(i));
                    }
                    zm.track_mut(i).copy_from_slice(noise.track(i));
                }
                let tc = TimestepVector::for_task(task, t, big_t)?;
                let tm = TimestepVector::for_task(&marginal_task, t, big_t)?;
                let eps_c = checked_predict(denoiser, &zc, &tc, prompt, shape)?;
                let eps_m = checked_predict(denoiser, &zm, &tm, prompt, shape)?;
                TrackLatents::from_vec(shape, cfg_combine(eps_m.data(), eps_c.data(), cfg.guidance_scale)?)?
            }
        };

        let sigma = cfg.sigma(schedule, t);
        for i in targets.iter() {
            let mean = posterior_mean(z.track(i), eps.track(i), t, schedule)?;
            fill_gaussian(rng, &mut step_noise);
            for ((dst, m), n) in z.track_mut(i).iter_mut().zip(&mean).zip(&step_noise) {
                *dst = m + sigma * n;
            }
        }
    }
    Ok(z)
}

fn checked_predict<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    z: &TrackLatents,
    tvec: &TimestepVector,
    prompt: &PromptTokens,
    shape: LatentShape,
) -> Result<TrackLatents> {
    let eps = denoiser.predict(z, tvec, prompt)?;
    if eps.shape() != shape {
        return Err(shape_mismatch(format!("denoiser output {shape}"), eps.shape()));
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::diffusion::TrackSet;

    struct Zero(LatentShape);

    impl NoisePredictor for Zero {
        fn latent_shape(&self) -> LatentShape {
            self.0
        }
        fn predict(&self, z: &TrackLatents, _: &TimestepVector, _: &PromptTokens) -> Result<TrackLatents> {
            Ok(TrackLatents::zeros(z.shape()))
        }
    }

    /// A deterministic, input-dependent predictor that counts its calls.
    struct Mixer {
        shape: LatentShape,
        calls: AtomicUsize,
    }

    impl NoisePredictor for Mixer {
        fn latent_shape(&self) -> LatentShape {
            self.shape
        }
        fn predict(&self, z: &TrackLatents, tvec: &TimestepVector, prompt: &PromptTokens) -> Result<TrackLatents> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let n = self.shape.track_len();
            let mut out = TrackLatents::zeros(self.shape);
            let bias = prompt.prefix as f64 * 0.01;
            for i in 0..self.shape.tracks {
                let other = z.track((i + 1) % self.shape.tracks);
                let t = tvec.steps()[i] as f64 * 1e-3;
                for j in 0..n {
                    out.track_mut(i)[j] = 0.3 * z.track(i)[j] + 0.2 * other[(j + 1) % n] + t + bias;
                }
            }
            Ok(out)
        }
    }

    fn shape() -> LatentShape {
        LatentShape::new(4, 2, 6)
    }

    fn locked_for(task: &TaskSpec, seed: u64) -> BTreeMap<usize, Vec<f64>> {
        let mut rng = seeded(seed);
        task.conditional()
            .iter()
            .map(|i| (i, crate::rng::gaussian_vec(&mut rng, shape().track_len())))
            .collect()
    }

    #[test]
    fn joint_sampling_is_deterministic_and_single_call() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let m = Mixer {
            shape: shape(),
            calls: AtomicUsize::new(0),
        };
        let task = TaskSpec::joint(4);
        let prompt = PromptTokens::new(15, vec![17]);
        let cfg = SamplerConfig::with_seed(11);
        let a = sample(&m, &task, &BTreeMap::new(), &prompt, &cfg, &sched, &mut cfg.rng()).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 10);
        let b = sample(&m, &task, &BTreeMap::new(), &prompt, &cfg, &sched, &mut cfg.rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_task_makes_two_calls_per_step_and_keeps_non_targets() {
        let sched = NoiseSchedule::linear(8, 1e-3, 0.05).unwrap();
        let m = Mixer {
            shape: shape(),
            calls: AtomicUsize::new(0),
        };
        let task = TaskSpec::new(4, TrackSet::from_indices([1, 2]), TrackSet::from_indices([0])).unwrap();
        let locked = locked_for(&task, 5);
        let cfg = SamplerConfig::with_seed(2);
        let out = sample(&m, &task, &locked, &PromptTokens::new(6, vec![]), &cfg, &sched, &mut cfg.rng()).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 16);
        assert_eq!(out.track(0), locked[&0].as_slice());
        // marginal track keeps its initial noise draw
        let mut rng = cfg.rng();
        let _initial = TrackLatents::gaussian(shape(), &mut rng);
        let marginal = TrackLatents::gaussian(shape(), &mut rng);
        assert_eq!(out.track(3), marginal.track(3));
    }

    #[test]
    fn lambda_one_matches_conditional_only_sampler() {
        let sched = NoiseSchedule::linear(12, 1e-3, 0.05).unwrap();
        let m = Mixer {
            shape: shape(),
            calls: AtomicUsize::new(0),
        };
        let task = TaskSpec::new(4, TrackSet::from_indices([3]), TrackSet::from_indices([0, 1, 2])).unwrap();
        let locked = locked_for(&task, 9);
        let prompt = PromptTokens::new(8, vec![20]);
        let cfg = SamplerConfig {
            guidance_scale: 1.0,
            seed: 4,
            ..SamplerConfig::default()
        };
        let got = sample(&m, &task, &locked, &prompt, &cfg, &sched, &mut cfg.rng()).unwrap();

        // Reference: only ever evaluates the conditional branch.
        let mut rng = cfg.rng();
        let init = TrackLatents::gaussian(shape(), &mut rng);
        let _marginal = TrackLatents::gaussian(shape(), &mut rng);
        let mut z = TrackLatents::zeros(shape());
        z.set_track(3, init.track(3)).unwrap();
        for (i, l) in &locked {
            z.set_track(*i, l).unwrap();
        }
        for t in (1..=12).rev() {
            let tv = TimestepVector::new(vec![0, 0, 0, t], 12).unwrap();
            let eps = m.predict(&z, &tv, &prompt).unwrap();
            let mean = posterior_mean(z.track(3), eps.track(3), t, &sched).unwrap();
            let noise = crate::rng::gaussian_vec(&mut rng, shape().track_len());
            let s = sched.beta(t).sqrt();
            let next: Vec<f64> = mean.iter().zip(&noise).map(|(a, b)| a + s * b).collect();
            z.set_track(3, &next).unwrap();
        }
        for (a, b) in got.data().iter().zip(z.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_step_zero_denoiser_trace() {
        let sched = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        let task = TaskSpec::joint(4);
        let cfg = SamplerConfig::with_seed(21);
        let out = sample(&Zero(shape()), &task, &BTreeMap::new(), &PromptTokens::new(15, vec![]), &cfg, &sched, &mut cfg.rng())
            .unwrap();
        let mut rng = cfg.rng();
        let init = TrackLatents::gaussian(shape(), &mut rng);
        let sigma = 0.02f64.sqrt();
        for i in 0..4 {
            let mean = posterior_mean(init.track(i), &[0.0; 12], 1, &sched).unwrap();
            let noise = crate::rng::gaussian_vec(&mut rng, 12);
            for j in 0..12 {
                assert_eq!(out.track(i)[j], mean[j] + sigma * noise[j]);
            }
        }
    }

    #[test]
    fn missing_or_extra_locked_tracks_are_rejected() {
        let sched = NoiseSchedule::linear(3, 1e-3, 0.05).unwrap();
        let task = TaskSpec::new(4, TrackSet::from_indices([0]), TrackSet::from_indices([1, 2])).unwrap();
        let mut locked = locked_for(&task, 1);
        locked.remove(&2);
        let cfg = SamplerConfig::default();
        let err = sample(&Zero(shape()), &task, &locked, &PromptTokens::new(1, vec![]), &cfg, &sched, &mut cfg.rng());
        assert!(matches!(err, Err(Error::MissingLocked(2))));
        let mut locked = locked_for(&task, 1);
        locked.insert(3, vec![0.0; 12]);
        let err = sample(&Zero(shape()), &task, &locked, &PromptTokens::new(1, vec![]), &cfg, &sched, &mut cfg.rng());
        assert!(err.is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let sched = NoiseSchedule::linear(3, 1e-3, 0.05).unwrap();
        let task = TaskSpec::joint(3);
        let cfg = SamplerConfig::default();
        assert!(sample(&Zero(shape()), &task, &BTreeMap::new(), &PromptTokens::new(7, vec![]), &cfg, &sched, &mut cfg.rng()).is_err());
    }
}
