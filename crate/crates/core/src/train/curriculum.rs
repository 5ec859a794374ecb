use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NonTargetMode, TaskSpec, TrackSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub tracks: usize,
    pub total_epochs: usize,
    pub phase_boundaries: (f64, f64),
    /// Probability that all non-targets are conditional rather than marginal.
    pub p1: f64,
    /// Probability that an eligible example is bootstrapped from the teacher.
    pub p2: f64,
    pub bootstrap_start_fraction: f64,
    pub ema_decay: f64,
}

impl CurriculumConfig {
    pub fn new(tracks: usize, total_epochs: usize) -> Self {
        Self {
            tracks,
            total_epochs,
            phase_boundaries: (0.3, 0.7),
            p1: 0.8,
            p2: 0.5,
            bootstrap_start_fraction: 0.6,
            ema_decay: 0.999,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.phase_boundaries;
        if self.tracks == 0 || self.tracks > TrackSet::MAX_TRACKS {
            return Err(Error::InvalidConfig(format!("track count {} out of range", self.tracks)));
        }
        if self.total_epochs == 0 {
            return Err(Error::InvalidConfig("total_epochs must be at least 1".into()));
        }
        if !(0.0 < b1 && b1 < b2 && b2 < 1.0) {
            return Err(Error::InvalidConfig(format!("phase boundaries {b1}, {b2} must satisfy 0 < b1 < b2 < 1")));
        }
        for (name, p) in [("p1", self.p1), ("p2", self.p2), ("bootstrap_start_fraction", self.bootstrap_start_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    /// First epoch at which bootstrapping may trigger.
    pub fn bootstrap_start_epoch(&self) -> usize {
        (self.bootstrap_start_fraction * self.total_epochs as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCategory {
    Single,
    Partial,
    Joint,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 3] = [TaskCategory::Single, TaskCategory::Partial, TaskCategory::Joint];

    pub fn of(tracks: usize, targets: TrackSet) -> Self {
        match targets.len() {
            n if n == tracks => TaskCategory::Joint,
            1 => TaskCategory::Single,
            _ => TaskCategory::Partial,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Target-subset distribution for one epoch. Subsets are listed in mask order.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub epoch: usize,
    pub tracks: usize,
    pub subsets: Vec<(TrackSet, f64)>,
}

impl CurriculumState {
    /// A fixed distribution, e.g. a single subset with probability 1.
    pub fn from_probabilities(epoch: usize, tracks: usize, subsets: Vec<(TrackSet, f64)>) -> Result<Self> {
        let sum: f64 = subsets.iter().map(|(_, p)| p).sum();
        if subsets.iter().any(|(s, p)| *p < 0.0 || !p.is_finite() || s.is_empty()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("task distribution must be non-negative and sum to 1".into()));
        }
        Ok(Self { epoch, tracks, subsets })
    }

    pub fn probability(&self, targets: TrackSet) -> f64 {
        self.subsets.iter().find(|(s, _)| *s == targets).map_or(0.0, |(_, p)| *p)
    }

    /// Probability mass per [`TaskCategory`], indexed by [`TaskCategory::index`].
    pub fn category_probs(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (s, p) in &self.subsets {
            out[TaskCategory::of(self.tracks, *s).index()] += p;
        }
        out
    }
}

/// Three-phase curriculum: singletons only, then a linear blend, then uniform
/// over every nonempty subset.
pub fn task_probabilities(config: &CurriculumConfig, epoch: usize) -> Result<CurriculumState> {
    config.validate()?;
    if epoch >= config.total_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside 0..{}",
            config.total_epochs
        )));
    }
    let k = config.tracks;
    let (b1, b2) = config.phase_boundaries;
    let frac = epoch as f64 / config.total_epochs as f64;
    let w = if frac < b1 {
        0.0
    } else if frac >= b2 {
        1.0
    } else {
        (frac - b1) / (b2 - b1)
    };
    let uniform = 1.0 / ((1u64 << k) - 1) as f64;
    let subsets = TrackSet::nonempty_subsets(k)
        .map(|s| {
            let early = if s.len() == 1 { 1.0 / k as f64 } else { 0.0 };
            (s, (1.0 - w) * early + w * uniform)
        })
        .collect();
    Ok(CurriculumState {
        epoch,
        tracks: k,
        subsets,
    })
}

pub fn sample_task<R: Rng + ?Sized>(state: &CurriculumState, rng: &mut R) -> TrackSet {
    let dist = WeightedIndex::new(state.subsets.iter().map(|(_, p)| *p)).expect("validated distribution");
    state.subsets[dist.sample(rng)].0
}

/// Assigns every non-target the same mode: conditional with probability `p1`.
pub fn sample_nontarget_modes<R: Rng + ?Sized>(tracks: usize, targets: TrackSet, p1: f64, rng: &mut R) -> Result<TaskSpec> {
    if targets.len() >= tracks {
        return Err(Error::InvalidTask("joint task has no non-target tracks".into()));
    }
    let mode = if rng.random::<f64>() < p1 {
        NonTargetMode::Conditional
    } else {
        NonTargetMode::Marginal
    };
    TaskSpec::uniform(tracks, targets, mode)
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::rng::seeded;

    #[test]
    fn phase_one_is_singletons() {
        let c = CurriculumConfig::new(4, 100);
        let s = task_probabilities(&c, 0).unwrap();
        for (set, p) in &s.subsets {
            let want = if set.len() == 1 { 0.25 } else { 0.0 };
            assert_eq!(*p, want);
        }
        let mut rng = seeded(1);
        for _ in 0..1000 {
            assert_eq!(sample_task(&s, &mut rng).len(), 1);
        }
    }

    #[test]
    fn phase_three_is_uniform() {
        let c = CurriculumConfig::new(4, 100);
        let s = task_probabilities(&c, 70).unwrap();
        assert_eq!(s.subsets.len(), 15);
        for (_, p) in &s.subsets {
            assert!((p - 1.0 / 15.0).abs() < 1e-15);
        }
    }

    #[test]
    fn phase_two_midpoint_is_the_mean() {
        let c = CurriculumConfig::new(4, 10);
        // Epoch 5 of 10 sits halfway between boundaries 0.3 and 0.7.
        let s = task_probabilities(&c, 5).unwrap();
        assert!((s.probability(TrackSet::from_indices([0])) - (0.25 + 1.0 / 15.0) / 2.0).abs() < 1e-15);
        assert!((s.probability(TrackSet::from_indices([0, 2])) - (1.0 / 30.0)).abs() < 1e-15);
    }

    #[test]
    fn probabilities_sum_to_one_every_epoch() {
        for k in 1..=5 {
            let c = CurriculumConfig::new(k, 37);
            for e in 0..37 {
                let s = task_probabilities(&c, e).unwrap();
                let sum: f64 = s.subsets.iter().map(|(_, p)| p).sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(s.subsets.iter().all(|(_, p)| *p >= 0.0));
            }
        }
        assert!(task_probabilities(&CurriculumConfig::new(4, 10), 10).is_err());
    }

    #[test]
    fn uniform_draws_pass_chi_square() {
        let c = CurriculumConfig::new(4, 10);
        let s = task_probabilities(&c, 9).unwrap();
        let mut rng = seeded(77);
        let n = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            counts[sample_task(&s, &mut rng).mask() as usize] += 1;
        }
        let e = n as f64 / 15.0;
        let chi2: f64 = counts[1..].iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        let crit = ChiSquared::new(14.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "{chi2} >= {crit}");
    }

    #[test]
    fn degenerate_distribution() {
        let only = TrackSet::from_indices([1, 3]);
        let s = CurriculumState::from_probabilities(0, 4, vec![(only, 1.0)]).unwrap();
        let mut rng = seeded(2);
        assert!((0..100).all(|_| sample_task(&s, &mut rng) == only));
    }

    #[test]
    fn nontarget_modes() {
        let mut rng = seeded(3);
        let t = TrackSet::from_indices([0]);
        assert!((0..200).all(|_| sample_nontarget_modes(4, t, 1.0, &mut rng).unwrap().marginal().is_empty()));
        assert!((0..200).all(|_| sample_nontarget_modes(4, t, 0.0, &mut rng).unwrap().conditional().is_empty()));
        assert!(sample_nontarget_modes(4, TrackSet::all(4), 0.5, &mut rng).is_err());
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| !sample_nontarget_modes(4, t, 0.8, &mut rng).unwrap().conditional().is_empty())
            .count();
        let frac = hits as f64 / n as f64;
        assert!((0.796..=0.804).contains(&frac), "{frac}");
    }

    #[test]
    fn config_validation() {
        let mut c = CurriculumConfig::new(4, 10);
        c.phase_boundaries = (0.7, 0.3);
        assert!(c.validate().is_err());
        let mut c = CurriculumConfig::new(4, 10);
        c.p1 = 1.5;
        assert!(c.validate().is_err());
        let mut c = CurriculumConfig::new(4, 10);
        c.ema_decay = 1.0;
        assert!(c.validate().is_err());
        assert_eq!(CurriculumConfig::new(4, 10).bootstrap_start_epoch(), 6);
    }
}
