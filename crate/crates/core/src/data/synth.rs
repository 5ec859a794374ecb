use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codec::{Codec, CodecKind};
use crate::diffusion::{LatentShape, TrackLatents};
use crate::error::{Error, Result};
use crate::prompt::PromptVocab;
use crate::rng::seeded;
use crate::train::TrainExample;

pub const TRACKS: usize = 4;
pub const BASS: usize = 0;
pub const DRUMS: usize = 1;
pub const INSTRUMENT: usize = 2;
pub const MELODY: usize = 3;

/// Melody pitch ratios relative to the bass fundamental.
pub const MELODY_RATIOS: [f64; 3] = [1.0, 1.25, 1.5];
/// Harmonics of the instrument track and their amplitudes.
pub const INSTRUMENT_HARMONICS: [(f64, f64); 2] = [(2.0, 0.6), (3.0, 0.4)];
const MELODY_SEGMENTS: usize = 4;
pub const MAX_MOTIFS: usize = 27;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub sample_rate: u32,
    /// Samples per track (`S`).
    pub segment_length: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub f0_buckets: Vec<f64>,
    /// Drum periods in samples.
    pub tempo_buckets: Vec<usize>,
    pub motif_count: usize,
    pub frame_size: usize,
    pub codec_kind: CodecKind,
    pub target_rms: f64,
    /// Gain applied by the codec to latents.
    pub latent_scale: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sample_rate: 4000,
            segment_length: 2048,
            num_samples: 512,
            seed: 0,
            // Exact DFT bins (56, 64, 72, 80) of a 2048-sample window at 4 kHz.
            f0_buckets: vec![109.375, 125.0, 140.625, 156.25],
            tempo_buckets: vec![250, 400, 500],
            motif_count: 4,
            frame_size: 32,
            codec_kind: CodecKind::IdentityFrames,
            target_rms: 0.1,
            latent_scale: 3.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate == 0 || self.segment_length == 0 {
            return bad("sample_rate and segment_length must be positive".into());
        }
        if self.frame_size == 0 || !self.segment_length.is_multiple_of(self.frame_size) {
            return bad(format!(
                "segment_length {} not divisible by frame_size {}",
                self.segment_length, self.frame_size
            ));
        }
        if self.segment_length < MELODY_SEGMENTS {
            return bad("segment_length too short for the melody".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.f0_buckets.is_empty() {
            return bad("f0_buckets is empty".into());
        }
        for &f in &self.f0_buckets {
            if !(f.is_finite() && f > 0.0 && 3.0 * f < nyquist) {
                return bad(format!("f0 bucket {f} Hz must be positive with 3·f0 below {nyquist} Hz"));
            }
        }
        if self.tempo_buckets.is_empty() {
            return bad("tempo_buckets is empty".into());
        }
        for &p in &self.tempo_buckets {
            if p < 2 || p > self.segment_length {
                return bad(format!("tempo period {p} outside 2..={}", self.segment_length));
            }
        }
        if self.motif_count == 0 || self.motif_count > MAX_MOTIFS {
            return bad(format!("motif_count must be in 1..={MAX_MOTIFS}"));
        }
        if !(self.target_rms.is_finite() && self.target_rms > 0.0) {
            return bad("target_rms must be positive".into());
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return bad("latent_scale must be positive".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> PromptVocab {
        PromptVocab {
            tracks: TRACKS,
            f0_buckets: self.f0_buckets.len(),
            tempo_buckets: self.tempo_buckets.len(),
            motifs: self.motif_count,
        }
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(TRACKS, self.frame_size, self.segment_length / self.frame_size)
    }

    /// The basis seed is fixed so every dataset shares one codec.
    pub fn codec(&self) -> Result<Codec> {
        Codec::new(self.codec_kind, self.frame_size, CODEC_SEED)?.with_scale(self.latent_scale)
    }

    /// Seed of the `i`-th sample, `i` counted from 1.
    pub fn sample_seed(&self, i: usize) -> u64 {
        (self.seed << 32) | i as u64
    }
}

const CODEC_SEED: u64 = 0x5EED_C0DE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub f0: f64,
    pub tempo_period: u32,
    pub motif: u32,
    pub seed: u64,
}

/// Four aligned stems (bass, drums, instrument, melody) and their prompt content.
#[derive(Debug, Clone, PartialEq)]
pub struct StemSample {
    pub waveforms: Vec<Vec<f32>>,
    pub content: Vec<u32>,
    pub meta: SampleMeta,
}

impl StemSample {
    pub fn waveform_f64(&self, track: usize) -> Vec<f64> {
        self.waveforms[track].iter().map(|&v| v as f64).collect()
    }

    pub fn latents(&self, codec: &Codec) -> Result<TrackLatents> {
        let len = self.waveforms[0].len();
        let shape = LatentShape::new(self.waveforms.len(), codec.frame_size(), len / codec.frame_size().max(1));
        let tracks = (0..self.waveforms.len())
            .map(|i| codec.encode(&self.waveform_f64(i)))
            .collect::<Result<Vec<_>>>()?;
        TrackLatents::from_tracks(shape, &tracks)
    }

    pub fn to_example(&self, codec: &Codec) -> Result<TrainExample> {
        Ok(TrainExample {
            latents: self.latents(codec)?,
            content: self.content.clone(),
        })
    }
}

/// Motif `m` visits segments with ratio indices `[d0, d1, d0, d2]`, the
/// base-3 digits of `m`.
pub fn motif_ratios(motif: usize) -> [f64; MELODY_SEGMENTS] {
    let d = [motif % 3, (motif / 3) % 3, (motif / 9) % 3];
    [MELODY_RATIOS[d[0]], MELODY_RATIOS[d[1]], MELODY_RATIOS[d[0]], MELODY_RATIOS[d[2]]]
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Scales `x` to the target RMS, then clips to `[-1, 1]`. Returns the
/// scaled track and how many samples were clipped.
pub fn normalize_track(x: &[f64], target_rms: f64) -> Result<(Vec<f64>, usize)> {
    if !(target_rms.is_finite() && target_rms > 0.0) {
        return Err(Error::InvalidInput(format!("target rms {target_rms} must be positive")));
    }
    let r = rms(x);
    if r == 0.0 || !r.is_finite() {
        return Err(Error::InvalidInput("cannot normalize a silent or non-finite track".into()));
    }
    let scale = target_rms / r;
    let mut clipped = 0;
    let out = x
        .iter()
        .map(|v| {
            let y = v * scale;
            if y.abs() > 1.0 {
                clipped += 1;
                y.clamp(-1.0, 1.0)
            } else {
                y
            }
        })
        .collect();
    Ok((out, clipped))
}

/// Normalizes every track; returns the tracks and the total clip count.
pub fn normalize_loudness(tracks: &[Vec<f64>], target_rms: f64) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut clipped = 0;
    let out = tracks
        .iter()
        .map(|t| {
            let (y, c) = normalize_track(t, target_rms)?;
            clipped += c;
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, clipped))
}

/// Mean of the stems, renormalized to the target RMS. A silent mix stays silent.
pub fn mix(tracks: &[Vec<f64>], target_rms: f64) -> Result<Vec<f64>> {
    let len = tracks.first().map_or(0, Vec::len);
    if tracks.iter().any(|t| t.len() != len) {
        return Err(Error::InvalidInput("stems differ in length".into()));
    }
    let inv = 1.0 / tracks.len().max(1) as f64;
    let mean: Vec<f64> = (0..len).map(|n| tracks.iter().map(|t| t[n]).sum::<f64>() * inv).collect();
    if rms(&mean) == 0.0 {
        return Ok(mean);
    }
    Ok(normalize_track(&mean, target_rms)?.0)
}

pub fn generate_sample(config: &DatasetConfig, seed: u64) -> Result<StemSample> {
    config.validate()?;
    let mut rng = seeded(seed);
    let f0_bucket = rng.random_range(0..config.f0_buckets.len());
    let tempo_bucket = rng.random_range(0..config.tempo_buckets.len());
    let motif = rng.random_range(0..config.motif_count);
    let f0 = config.f0_buckets[f0_bucket];
    let period = config.tempo_buckets[tempo_bucket];
    let sr = config.sample_rate as f64;
    let n = config.segment_length;
    let w = 2.0 * PI * f0 / sr;
    let phase = |rng: &mut crate::rng::StemRng| rng.random_range(0.0..2.0 * PI);

    let pb = phase(&mut rng);
    let bass: Vec<f64> = (0..n).map(|i| (w * i as f64 + pb).sin()).collect();

    let onset = rng.random_range(0..period);
    let decay = period as f64 / 8.0;
    let drums: Vec<f64> = (0..n)
        .map(|i| {
            let since = (i + period - onset) % period;
            rng.random_range(-1.0..1.0) * (-(since as f64) / decay).exp()
        })
        .collect();

    let phases: Vec<f64> = INSTRUMENT_HARMONICS.iter().map(|_| phase(&mut rng)).collect();
    let instrument: Vec<f64> = (0..n)
        .map(|i| {
            INSTRUMENT_HARMONICS
                .iter()
                .zip(&phases)
                .map(|(&(h, a), p)| a * (h * w * i as f64 + p).sin())
                .sum()
        })
        .collect();

    let ratios = motif_ratios(motif);
    let seg = n / MELODY_SEGMENTS;
    let mut acc = phase(&mut rng);
    let melody: Vec<f64> = (0..n)
        .map(|i| {
            let v = acc.sin();
            acc += w * ratios[(i / seg).min(MELODY_SEGMENTS - 1)];
            v
        })
        .collect();

    let (tracks, clipped) = normalize_loudness(&[bass, drums, instrument, melody], config.target_rms)?;
    if clipped > 0 {
        log::warn!("sample {seed}: {clipped} samples clipped during normalization");
    }
    Ok(StemSample {
        waveforms: tracks.iter().map(|t| t.iter().map(|&v| v as f32).collect()).collect(),
        content: config.vocab().content(f0_bucket, tempo_bucket, motif),
        meta: SampleMeta {
            f0,
            tempo_period: period as u32,
            motif: motif as u32,
            seed,
        },
    })
}

/// Samples with seeds `sample_seed(1..=num_samples)`.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<StemSample>> {
    config.validate()?;
    (1..=config.num_samples)
        .into_par_iter()
        .map(|i| generate_sample(config, config.sample_seed(i)))
        .collect()
}
