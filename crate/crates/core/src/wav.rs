//! Mono PCM16 RIFF WAVE files.

use std::path::Path;

use crate::error::{Error, Result};

/// Float sample to PCM16: scale by 32767, round half away from zero, clamp.
pub fn to_pcm16(x: f64) -> i16 {
    if x.is_nan() {
        return 0;
    }
    (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn from_pcm16(v: i16) -> f64 {
    v as f64 / 32767.0
}

pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &x in samples {
        out.extend_from_slice(&to_pcm16(x).to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wav {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

/// Reads mono PCM16 only. Unknown chunks are skipped.
pub fn decode_wav(bytes: &[u8]) -> Result<Wav> {
    let bad = |m: &str| Error::Format(format!("wav: {m}"));
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF WAVE file"));
    }
    let mut pos = 12;
    let mut format = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated chunk"))?;
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(bad("short fmt chunk"));
                }
                let (tag, channels, rate, bits) =
                    (u16_at(bytes, body), u16_at(bytes, body + 2), u32_at(bytes, body + 4), u16_at(bytes, body + 14));
                if tag != 1 || channels != 1 || bits != 16 {
                    return Err(bad("only mono 16-bit PCM is supported"));
                }
                format = Some(rate);
            }
            b"data" => {
                let rate = format.ok_or_else(|| bad("data before fmt"))?;
                if !len.is_multiple_of(2) {
                    return Err(bad("odd data length"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| from_pcm16(i16::from_le_bytes([c[0], c[1]])))
                    .collect();
                return Ok(Wav {
                    sample_rate: rate,
                    samples,
                });
            }
            _ => {}
        }
        pos = end + (len & 1);
    }
    Err(bad("no data chunk"))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    std::fs::write(path, encode_wav(samples, sample_rate))?;
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Wav> {
    decode_wav(&std::fs::read(path)?)
}
