use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Noise levels `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏ α_i` for `t = 1..=T`.
///
/// Accessors take the 1-based diffusion timestep; `alpha_bar(0)` is `1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(num_steps, beta_start, beta_end),
        }
    }

    /// Linearly spaced betas, inclusive of both endpoints.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be >= 1".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "beta bounds must be finite (got {beta_start}, {beta_end})"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1 (got {beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_start + (beta_end - beta_start) * (i as f64) / span)
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`, zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}
