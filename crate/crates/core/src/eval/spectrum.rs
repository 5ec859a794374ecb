use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const BANDS: usize = 16;

/// Magnitudes of DFT bins `0..=N/2` over the full window.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}

pub fn bin_hz(len: usize, sample_rate: u32) -> f64 {
    sample_rate as f64 / len as f64
}

/// Index of the strongest non-DC bin.
pub fn dominant_bin(x: &[f64]) -> Result<usize> {
    let mag = magnitude_spectrum(x);
    let scale: f64 = x.iter().map(|v| v.abs()).sum();
    let (bin, peak) = mag
        .iter()
        .enumerate()
        .skip(1)
        .fold((0, 0.0), |best, (k, &m)| if m > best.1 { (k, m) } else { best });
    if !scale.is_finite() || !peak.is_finite() {
        return Err(Error::NonFinite("waveform".into()));
    }
    // A constant signal leaves only roundoff outside bin 0.
    if bin == 0 || peak <= 1e-9 * scale {
        return Err(Error::InvalidInput("waveform has no non-DC content".into()));
    }
    Ok(bin)
}

/// Frequency in Hz of the strongest non-DC bin.
pub fn dominant_f0(x: &[f64], sample_rate: u32) -> Result<f64> {
    Ok(dominant_bin(x)? as f64 * bin_hz(x.len(), sample_rate))
}

/// Log energies of 16 equal-width bands over bins `0..N/2`.
pub fn band_features(x: &[f64]) -> Result<[f64; BANDS]> {
    let mag = magnitude_spectrum(x);
    let usable = x.len() / 2;
    if usable < BANDS {
        return Err(Error::InvalidInput(format!("need at least {} samples for band features", 2 * BANDS)));
    }
    let mut out = [0.0; BANDS];
    for (b, slot) in out.iter_mut().enumerate() {
        let lo = b * usable / BANDS;
        let hi = (b + 1) * usable / BANDS;
        let energy: f64 = mag[lo..hi].iter().map(|m| m * m).sum();
        *slot = (energy + 1e-12).ln();
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("band features".into()));
    }
    Ok(out)
}
