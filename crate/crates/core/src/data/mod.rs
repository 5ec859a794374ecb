//! Synthetic four-stem dataset, loudness normalization, the invertible frame
//! codec, and the dataset container.

mod codec;
mod file;
mod synth;

pub use codec::{Codec, CodecKind};
pub use file::{decode_dataset, encode_dataset, read_dataset, write_dataset, Dataset, DatasetHeader};
pub use synth::{
    generate_dataset, generate_sample, mix, motif_ratios, normalize_loudness, normalize_track, rms, DatasetConfig,
    SampleMeta, StemSample, BASS, DRUMS, INSTRUMENT, INSTRUMENT_HARMONICS, MAX_MOTIFS, MELODY, MELODY_RATIOS, TRACKS,
};

impl DatasetHeader {
    pub fn for_config(config: &DatasetConfig) -> Self {
        Self {
            tracks: TRACKS as u32,
            sample_rate: config.sample_rate,
            segment_length: config.segment_length as u32,
            vocab_size: config.vocab().size() as u32,
        }
    }
}
