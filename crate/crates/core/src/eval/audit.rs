use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::diffusion::TrackSet;
use crate::error::{Error, Result};
use crate::train::{sample_nontarget_modes, sample_task, CurriculumState};

pub const MIN_DRAWS: usize = 10_000;
pub const LEVEL: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub name: String,
    pub draws: usize,
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    pub pass: bool,
}

/// Pearson goodness of fit at the 99% level. Categories with zero expected
/// probability fail the audit outright if they were ever observed.
pub fn chi_square(name: &str, observed: &[usize], expected: &[f64]) -> Result<ChiSquareReport> {
    if observed.len() != expected.len() {
        return Err(Error::InvalidInput("observed and expected lengths differ".into()));
    }
    let draws: usize = observed.iter().sum();
    if draws < MIN_DRAWS {
        return Err(Error::InvalidInput(format!("{draws} draws; at least {MIN_DRAWS} required")));
    }
    let total_p: f64 = expected.iter().sum();
    if expected.iter().any(|p| *p < 0.0) || (total_p - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("expected probabilities must sum to 1".into()));
    }
    let mut statistic = 0.0;
    let mut cells = 0usize;
    let mut impossible = false;
    for (&o, &p) in observed.iter().zip(expected) {
        if p == 0.0 {
            impossible |= o > 0;
            continue;
        }
        let e = p * draws as f64;
        statistic += (o as f64 - e).powi(2) / e;
        cells += 1;
    }
    let dof = cells.saturating_sub(1);
    let critical = if dof == 0 {
        0.0
    } else {
        ChiSquared::new(dof as f64)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .inverse_cdf(LEVEL)
    };
    let pass = !impossible && (dof == 0 || statistic < critical);
    Ok(ChiSquareReport {
        name: name.into(),
        draws,
        statistic,
        dof,
        critical,
        pass,
    })
}

/// Counts of each target subset (indexed by mask) over `draws` samples.
pub fn task_counts<R: Rng + ?Sized>(state: &CurriculumState, draws: usize, rng: &mut R) -> Vec<usize> {
    let mut counts = vec![0; 1 << state.tracks];
    for _ in 0..draws {
        counts[sample_task(state, rng).mask() as usize] += 1;
    }
    counts
}

pub fn audit_task_counts(state: &CurriculumState, counts: &[usize]) -> Result<ChiSquareReport> {
    let expected: Vec<f64> = (0..counts.len() as u32)
        .map(|m| if m == 0 { 0.0 } else { state.probability(TrackSet::from_mask(m)) })
        .collect();
    chi_square("task_subsets", counts, &expected)
}

/// Audits non-target mode draws: `conditional` of `draws` were conditional.
pub fn audit_mode_counts(conditional: usize, draws: usize, p1: f64) -> Result<ChiSquareReport> {
    if conditional > draws {
        return Err(Error::InvalidInput("more conditional draws than draws".into()));
    }
    chi_square("nontarget_modes", &[conditional, draws - conditional], &[p1, 1.0 - p1])
}

/// `|fraction − p| ≤ 3·√(p(1−p)/n)`.
pub fn within_binomial_band(successes: usize, draws: usize, p: f64) -> bool {
    let n = draws as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    (successes as f64 / n - p).abs() <= 3.0 * sigma
}

/// Draws from the samplers themselves and audits both.
pub fn audit_samplers<R: Rng + ?Sized>(
    state: &CurriculumState,
    p1: f64,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<ChiSquareReport>> {
    let counts = task_counts(state, draws, rng);
    let single = TrackSet::from_indices([0]);
    let mut conditional = 0;
    for _ in 0..draws {
        let task = sample_nontarget_modes(state.tracks.max(2), single, p1, rng)?;
        conditional += usize::from(!task.conditional().is_empty());
    }
    Ok(vec![audit_task_counts(state, &counts)?, audit_mode_counts(conditional, draws, p1)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::train::{task_probabilities, CurriculumConfig};

    #[test]
    fn self_draws_pass() {
        let c = CurriculumConfig::new(4, 10);
        for epoch in [0, 5, 9] {
            let s = task_probabilities(&c, epoch).unwrap();
            let reports = audit_samplers(&s, 0.8, 100_000, &mut seeded(epoch as u64)).unwrap();
            assert!(reports.iter().all(|r| r.pass), "{reports:?}");
        }
    }

    #[test]
    fn uniform_modes_fail_against_p1() {
        let r = audit_mode_counts(50_000, 100_000, 0.8).unwrap();
        assert!(!r.pass);
        assert!(!within_binomial_band(50_000, 100_000, 0.8));
        assert!(within_binomial_band(80_100, 100_000, 0.8));
    }

    #[test]
    fn phase_one_forbids_multi_track_draws() {
        let s = task_probabilities(&CurriculumConfig::new(4, 10), 0).unwrap();
        let mut counts = vec![0; 16];
        counts[1] = 2_500;
        counts[2] = 2_500;
        counts[4] = 2_500;
        counts[8] = 2_500;
        assert!(audit_task_counts(&s, &counts).unwrap().pass);
        counts[3] = 1;
        assert!(!audit_task_counts(&s, &counts).unwrap().pass);
    }

    #[test]
    fn too_few_draws() {
        assert!(audit_mode_counts(10, 100, 0.8).is_err());
    }
}
