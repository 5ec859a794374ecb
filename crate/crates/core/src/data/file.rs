//! `STEM` dataset container.
//!
//! ```text
//! "STEM" | version u32
//! K u32 | sample_rate u32 | S u32 | vocab_size u32 | count u64
//! repeated: token_count u32 | ids u32… | f0 f64 | tempo_period u32 | motif u32 | seed u64 | K × S f32
//! crc32 u32 over every preceding byte
//! ```
//!
//! Records carry prompt content tokens only; the task prefix is chosen at
//! training time.

use std::fs;
use std::path::Path;

use super::synth::{SampleMeta, StemSample};
use crate::error::{Error, Result};
use crate::tensorfile::{verify_crc, Reader};

pub const MAGIC: &[u8; 4] = b"STEM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub tracks: u32,
    pub sample_rate: u32,
    pub segment_length: u32,
    pub vocab_size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<StemSample>,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(header: &DatasetHeader, samples: &[StemSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [header.tracks, header.sample_rate, header.segment_length, header.vocab_size] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        if s.waveforms.len() != header.tracks as usize
            || s.waveforms.iter().any(|w| w.len() != header.segment_length as usize)
        {
            return Err(Error::InvalidInput(format!(
                "sample {} does not match the {}×{} header",
                s.meta.seed, header.tracks, header.segment_length
            )));
        }
        if let Some(&bad) = s.content.iter().find(|&&id| id >= header.vocab_size) {
            return Err(Error::InvalidPrompt(format!("token {bad} outside vocabulary")));
        }
        out.extend_from_slice(&u32_of(s.content.len(), "token count")?.to_le_bytes());
        for id in &s.content {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&s.meta.f0.to_le_bytes());
        out.extend_from_slice(&s.meta.tempo_period.to_le_bytes());
        out.extend_from_slice(&s.meta.motif.to_le_bytes());
        out.extend_from_slice(&s.meta.seed.to_le_bytes());
        for w in &s.waveforms {
            for v in w {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing STEM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported STEM version {version}")));
    }
    let body = verify_crc(bytes)?;
    let mut r = Reader::new(&body[8..]);
    let header = DatasetHeader {
        tracks: r.u32()?,
        sample_rate: r.u32()?,
        segment_length: r.u32()?,
        vocab_size: r.u32()?,
    };
    let count = r.u64()?;
    let per_sample = header.tracks as usize * header.segment_length as usize;
    let mut samples = Vec::new();
    for i in 0..count {
        let tokens = r.u32()? as usize;
        let content = (0..tokens).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = content.iter().find(|&&id| id >= header.vocab_size) {
            return Err(Error::Format(format!("record {i}: token {bad} outside vocabulary")));
        }
        let meta = SampleMeta {
            f0: r.f64()?,
            tempo_period: r.u32()?,
            motif: r.u32()?,
            seed: r.u64()?,
        };
        let flat = r.f32s(per_sample)?;
        let waveforms = flat.chunks(header.segment_length.max(1) as usize).map(<[f32]>::to_vec).collect();
        samples.push(StemSample {
            waveforms,
            content,
            meta,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after the last record", r.remaining())));
    }
    Ok(Dataset { header, samples })
}

pub fn write_dataset(path: impl AsRef<Path>, header: &DatasetHeader, samples: &[StemSample]) -> Result<()> {
    fs::write(path, encode_dataset(header, samples)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
