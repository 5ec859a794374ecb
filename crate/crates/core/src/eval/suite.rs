use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coherence::{coherence_eval, CoherenceReport};
use super::frechet::frechet_proxy;
use super::spectrum::band_features;
use crate::data::{mix, Codec, StemSample, BASS};
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule, SamplerConfig, TaskSpec, TrackLatents, TrackSet};
use crate::error::{Error, Result};
use crate::prompt::PromptTokens;
use crate::rng::{gaussian_vec, seeded};

/// Per-generation sampler seed: distinct streams derived from one base seed.
pub fn generation_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

pub fn decode_tracks(latents: &TrackLatents, codec: &Codec) -> Result<Vec<Vec<f64>>> {
    (0..latents.shape().tracks).map(|i| codec.decode(latents.track(i))).collect()
}

/// Generates every other track given a sample's ground-truth bass.
pub fn generate_given_bass<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    sample_ref: &StemSample,
    codec: &Codec,
) -> Result<Vec<Vec<f64>>> {
    let shape = model.latent_shape();
    let conditional = TrackSet::from_indices([BASS]);
    let targets = TrackSet::all(shape.tracks).difference(conditional);
    let task = TaskSpec::new(shape.tracks, targets, conditional)?;
    let truth = sample_ref.latents(codec)?;
    let locked = BTreeMap::from([(BASS, truth.track(BASS).to_vec())]);
    let prompt = PromptTokens::for_task(targets, &sample_ref.content);
    let z = sample(model, &task, &locked, &prompt, sampler, schedule, &mut sampler.rng())?;
    let mut tracks = decode_tracks(&z, codec)?;
    tracks[BASS] = sample_ref.waveform_f64(BASS);
    Ok(tracks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSummary {
    pub generations: usize,
    /// Fraction passing the instrument/bass ratio check.
    pub ratio_pass_rate: f64,
    pub reports: Vec<CoherenceReport>,
}

/// Conditional generation given bass for each reference sample, scored with
/// [`coherence_eval`]. Generation `i` samples with `generation_seed(seed, i)`.
pub fn conditional_coherence<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    references: &[StemSample],
    codec: &Codec,
    sample_rate: u32,
) -> Result<ConditionalSummary> {
    if references.is_empty() {
        return Err(Error::InvalidInput("no reference samples".into()));
    }
    let reports = references
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SamplerConfig {
                seed: generation_seed(sampler.seed, i),
                ..*sampler
            };
            let tracks = generate_given_bass(model, schedule, &cfg, s, codec)?;
            coherence_eval(&tracks, sample_rate, &s.meta)
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = reports
        .iter()
        .filter(|r| r.check("instrument_bass_ratio").is_some_and(|c| c.pass))
        .count();
    Ok(ConditionalSummary {
        generations: reports.len(),
        ratio_pass_rate: passed as f64 / reports.len() as f64,
        reports,
    })
}

/// Joint generation of all tracks for each content prompt, returned as mixes.
pub fn generate_mixes<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    contents: &[Vec<u32>],
    codec: &Codec,
    target_rms: f64,
) -> Result<Vec<Vec<f64>>> {
    let k = model.latent_shape().tracks;
    let task = TaskSpec::joint(k);
    contents
        .par_iter()
        .enumerate()
        .map(|(i, content)| {
            let cfg = SamplerConfig {
                seed: generation_seed(sampler.seed, i),
                ..*sampler
            };
            let prompt = PromptTokens::for_task(task.targets(), content);
            let z = sample(model, &task, &BTreeMap::new(), &prompt, &cfg, schedule, &mut cfg.rng())?;
            mix(&decode_tracks(&z, codec)?, target_rms)
        })
        .collect()
}

/// Adds white Gaussian noise at the given SNR, measured per signal.
pub fn add_noise<R: Rng + ?Sized>(x: &[f64], snr_db: f64, rng: &mut R) -> Vec<f64> {
    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    x.iter().zip(gaussian_vec(rng, x.len())).map(|(v, n)| v + sigma * n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetOrdering {
    pub generated_vs_heldout: f64,
    pub heldout_vs_noisy: f64,
}

impl FrechetOrdering {
    pub fn pass(&self) -> bool {
        self.generated_vs_heldout < self.heldout_vs_noisy
    }
}

/// Fréchet distance of generated mixes against held-out ones, alongside the
/// distance of the held-out mixes to a copy of themselves at 0 dB SNR.
pub fn frechet_ordering(generated: &[Vec<f64>], heldout: &[Vec<f64>], noise_seed: u64) -> Result<FrechetOrdering> {
    let feats = |set: &[Vec<f64>]| set.iter().map(|x| Ok(band_features(x)?.to_vec())).collect::<Result<Vec<_>>>();
    let mut rng = seeded(noise_seed);
    let noisy: Vec<Vec<f64>> = heldout.iter().map(|x| add_noise(x, 0.0, &mut rng)).collect();
    let held = feats(heldout)?;
    Ok(FrechetOrdering {
        generated_vs_heldout: frechet_proxy(&feats(generated)?, &held)?,
        heldout_vs_noisy: frechet_proxy(&held, &feats(&noisy)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, DatasetConfig};

    #[test]
    fn noise_at_zero_db_matches_signal_power() {
        let x: Vec<f64> = (0..20_000).map(|i| (i as f64 * 0.1).sin()).collect();
        let y = add_noise(&x, 0.0, &mut seeded(1));
        let noise: f64 = x.iter().zip(&y).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / x.len() as f64;
        assert!((noise - 0.5).abs() < 0.02, "{noise}");
    }

    #[test]
    fn real_mixes_beat_noisy_copies() {
        let c = DatasetConfig::default();
        let mixes = |offset: u64| -> Vec<Vec<f64>> {
            (0..64)
                .map(|i| {
                    let s = generate_sample(&c, offset + i).unwrap();
                    let t: Vec<Vec<f64>> = (0..4).map(|k| s.waveform_f64(k)).collect();
                    mix(&t, c.target_rms).unwrap()
                })
                .collect()
        };
        let r = frechet_ordering(&mixes(1000), &mixes(0), 9).unwrap();
        assert!(r.pass(), "{r:?}");
    }

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(generation_seed(0, 0), generation_seed(0, 1));
        assert_ne!(generation_seed(1, 0), generation_seed(0, 0));
    }
}
