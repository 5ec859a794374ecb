use serde::{Deserialize, Serialize};

use super::spectrum::{bin_hz, dominant_f0};
use crate::data::{motif_ratios, SampleMeta, BASS, DRUMS, INSTRUMENT, INSTRUMENT_HARMONICS, MELODY, TRACKS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceCheck {
    pub name: String,
    pub track: usize,
    /// The measured quantity: a frequency ratio, or a period in samples.
    pub value: f64,
    /// Distance from the nearest allowed value, in Hz or samples.
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// Dominant frequency per track; `None` for a silent track.
    pub f0: Vec<Option<f64>>,
    pub drum_period: Option<usize>,
    pub checks: Vec<CoherenceCheck>,
}

impl CoherenceReport {
    pub fn check(&self, name: &str) -> Option<&CoherenceCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Tolerance on the drum period estimate, in samples.
pub fn period_tolerance(period: usize) -> f64 {
    (period as f64 / 32.0).max(2.0)
}

/// Lag of the strongest autocorrelation peak of the energy envelope, looking
/// past the first zero crossing so the trivial peak at lag 0 is skipped.
pub fn envelope_period(x: &[f64]) -> Option<usize> {
    let n = x.len();
    let energy: Vec<f64> = x.iter().map(|v| v * v).collect();
    let mean = energy.iter().sum::<f64>() / n.max(1) as f64;
    let e: Vec<f64> = energy.iter().map(|v| v - mean).collect();
    let r0: f64 = e.iter().map(|v| v * v).sum();
    if r0 <= 0.0 || !r0.is_finite() {
        return None;
    }
    let ac = |lag: usize| e[..n - lag].iter().zip(&e[lag..]).map(|(a, b)| a * b).sum::<f64>() / r0;
    let max_lag = n / 2;
    let start = (1..max_lag).find(|&l| ac(l) < 0.0)?;
    (start..max_lag).map(|l| (l, ac(l))).max_by(|a, b| a.1.total_cmp(&b.1)).map(|(l, _)| l)
}

fn ratio_check(name: &str, track: usize, f: Option<f64>, bass: Option<f64>, allowed: &[f64], tol: f64) -> CoherenceCheck {
    match (f, bass) {
        (Some(f), Some(b)) => {
            let error = allowed.iter().map(|r| (f - r * b).abs()).fold(f64::INFINITY, f64::min);
            CoherenceCheck {
                name: name.into(),
                track,
                value: f / b,
                error,
                tolerance: tol,
                pass: error <= tol,
            }
        }
        _ => CoherenceCheck {
            name: name.into(),
            track,
            value: f64::NAN,
            error: f64::INFINITY,
            tolerance: tol,
            pass: false,
        },
    }
}

/// Checks generated stems against the harmonic and rhythmic relations the
/// dataset is built on. Silent tracks fail their checks rather than erroring.
pub fn coherence_eval(tracks: &[Vec<f64>], sample_rate: u32, meta: &SampleMeta) -> Result<CoherenceReport> {
    if tracks.len() != TRACKS {
        return Err(Error::InvalidInput(format!("expected {TRACKS} tracks, got {}", tracks.len())));
    }
    let len = tracks[0].len();
    if len == 0 || tracks.iter().any(|t| t.len() != len) {
        return Err(Error::InvalidInput("tracks must share a non-zero length".into()));
    }
    let tol = bin_hz(len, sample_rate);
    let f0: Vec<Option<f64>> = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| match dominant_f0(t, sample_rate) {
            Ok(f) => Some(f),
            Err(Error::InvalidInput(_)) => {
                log::warn!("track {i} is silent");
                None
            }
            Err(_) => None,
        })
        .collect();

    let harmonics: Vec<f64> = INSTRUMENT_HARMONICS.iter().map(|&(h, _)| h).collect();
    let mut melody: Vec<f64> = motif_ratios(meta.motif as usize).to_vec();
    melody.dedup();
    let mut checks = vec![
        ratio_check("bass_prompt", BASS, f0[BASS], Some(1.0), &[meta.f0], tol),
        ratio_check("instrument_bass_ratio", INSTRUMENT, f0[INSTRUMENT], f0[BASS], &harmonics, tol),
        ratio_check("melody_bass_ratio", MELODY, f0[MELODY], f0[BASS], &melody, tol),
    ];
    // The prompt check compares against the prompted f0 directly.
    checks[0].value = f0[BASS].unwrap_or(f64::NAN);

    let drum_period = envelope_period(&tracks[DRUMS]);
    let want = meta.tempo_period as usize;
    let ptol = period_tolerance(want);
    let perr = drum_period.map_or(f64::INFINITY, |p| (p as f64 - want as f64).abs());
    checks.push(CoherenceCheck {
        name: "drum_period".into(),
        track: DRUMS,
        value: drum_period.map_or(f64::NAN, |p| p as f64),
        error: perr,
        tolerance: ptol,
        pass: perr <= ptol,
    });
    Ok(CoherenceReport {
        f0,
        drum_period,
        checks,
    })
}
