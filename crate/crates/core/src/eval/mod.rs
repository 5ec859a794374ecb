//! Desk-scale metrics: dominant frequencies and cross-track coherence, a
//! Fréchet distance over fixed spectral-band features, and goodness-of-fit
//! audits of the curriculum samplers.

mod audit;
mod coherence;
mod frechet;
mod report;
mod spectrum;
mod suite;

pub use audit::{
    audit_mode_counts, audit_samplers, audit_task_counts, chi_square, task_counts, within_binomial_band,
    ChiSquareReport, MIN_DRAWS,
};
pub use coherence::{coherence_eval, envelope_period, period_tolerance, CoherenceCheck, CoherenceReport};
pub use frechet::{frechet_proxy, MIN_SET_SIZE};
pub use report::{audit_record, coherence_records, write_csv, write_ndjson, MetricRecord};
pub use spectrum::{band_features, bin_hz, dominant_bin, dominant_f0, magnitude_spectrum, BANDS};
pub use suite::{
    add_noise, conditional_coherence, decode_tracks, frechet_ordering, generate_given_bass, generate_mixes,
    generation_seed, ConditionalSummary, FrechetOrdering,
};
