use serde::{Deserialize, Serialize};

use crate::denoiser::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LrSchedule {
    /// `lr_start · (1 − step / total_steps)`.
    #[default]
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Probability of replacing the prompt content by the null token, which
    /// trains the unconditional branch used by text-level guidance.
    pub prompt_dropout: f64,
}

impl TrainConfig {
    /// Small model, small data: a larger step and more updates per epoch
    /// than the published recipe.
    pub fn desk() -> Self {
        Self {
            lr_start: 1e-3,
            lr_schedule: LrSchedule::LinearDecay,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
            grad_clip: 0.7,
            epochs: 60,
            seed: 0,
            prompt_dropout: 0.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr_start: 3e-5,
            batch_size: 12,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_start", self.lr_start),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("grad_clip", self.grad_clip),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig(format!("{name} = {v} must be positive")));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidConfig("betas must be below 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(Error::InvalidConfig("prompt_dropout outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `step` out of `total_steps`.
    pub fn learning_rate(&self, step: u64, total_steps: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::LinearDecay => {
                let frac = (step as f64 / total_steps.max(1) as f64).min(1.0);
                self.lr_start * (1.0 - frac)
            }
        }
    }
}

/// First and second moment estimates plus the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&state.m)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    let values = params.values_mut().zip(grads.values()).zip(state.m.values_mut().zip(state.v.values_mut()));
    for ((p, &g), (m, v)) in values {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * config.weight_decay * *p;
        *p -= lr * mhat / (vhat.sqrt() + config.eps);
    }
    Ok(())
}

/// Scales `grads` in place so the global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParameterSet, threshold: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > threshold {
        grads.scale(threshold / norm);
    }
    norm
}

/// `teacher ← decay · teacher + (1 − decay) · student`.
pub fn ema_update(teacher: &mut ParameterSet, student: &ParameterSet, decay: f64) -> Result<()> {
    teacher.check_layout(student)?;
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidConfig(format!("ema decay {decay} outside [0, 1)")));
    }
    for (t, &s) in teacher.values_mut().zip(student.values()) {
        *t = decay * *t + (1.0 - decay) * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::denoiser::Parameter;

    fn set(values: &[f64]) -> ParameterSet {
        ParameterSet::from_parameters(vec![Parameter {
            name: "w".into(),
            shape: vec![values.len()],
            data: values.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = set(&[0.3, -1.2]);
        let g = set(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::desk()
        };
        adamw_step(&mut p, &g, &mut st, &cfg, 1e-3).unwrap();
        assert_eq!(p.flatten(), vec![0.3, -1.2]);
    }

    #[test]
    fn scalar_hand_trace() {
        // One step from p=1, g=0.5, lr=0.01, wd=0.1:
        // m = 0.05, v = 0.0125, m̂ = 0.5, v̂ = 0.25,
        // p = 1 − 0.01·0.1·1 − 0.01·0.5/(0.5 + 1e-8).
        let mut p = set(&[1.0]);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &set(&[0.5]), &mut st, &TrainConfig::desk(), 0.01).unwrap();
        let want = 1.0 - 0.001 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.flatten()[0] - want).abs() < 1e-15);
        // Second step with g=-0.25 continues the recursion.
        adamw_step(&mut p, &set(&[-0.25]), &mut st, &TrainConfig::desk(), 0.01).unwrap();
        let m = 0.9 * 0.05 + 0.1 * -0.25;
        let v = 0.95 * 0.0125 + 0.05 * 0.0625;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.9025);
        let want = want - 0.001 * want - 0.01 * mhat / (f64::sqrt(vhat) + 1e-8);
        assert!((p.flatten()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_only() {
        let mut p = set(&[2.0, -4.0]);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &set(&[0.0, 0.0]), &mut st, &TrainConfig::desk(), 0.05).unwrap();
        assert_eq!(p.flatten(), vec![2.0 * (1.0 - 0.005), -4.0 * (1.0 - 0.005)]);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut p = set(&[1.0]);
        let mut st = AdamState::new(&p);
        assert!(adamw_step(&mut p, &set(&[f64::NAN]), &mut st, &TrainConfig::desk(), 0.1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = set(&[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut g, 0.7), 0.5);
        assert_eq!(g.flatten(), vec![0.3, 0.4]);
        let mut g = set(&[3.0, 4.0]);
        clip_gradients(&mut g, 0.7);
        let f = g.flatten();
        assert!((f[0] - 0.42).abs() < 1e-15 && (f[1] - 0.56).abs() < 1e-15);
        let mut g = set(&[0.0, 0.0]);
        clip_gradients(&mut g, 0.7);
        assert_eq!(g.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn ema_direct() {
        let mut t = set(&[1.0]);
        ema_update(&mut t, &set(&[0.0]), 0.999).unwrap();
        assert_eq!(t.flatten(), vec![0.999]);
        ema_update(&mut t, &set(&[5.0]), 0.0).unwrap();
        assert_eq!(t.flatten(), vec![5.0]);
        assert!(ema_update(&mut t, &set(&[1.0, 2.0]), 0.5).is_err());
    }

    #[test]
    fn schedule_is_linear_and_nonincreasing() {
        let c = TrainConfig::desk();
        assert_eq!(c.learning_rate(0, 100), 1e-3);
        assert!((c.learning_rate(50, 100) - 5e-4).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| c.learning_rate(s, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(TrainConfig::paper().lr_start, 3e-5);
        assert_eq!(TrainConfig::paper().batch_size, 12);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_threshold(v in proptest::collection::vec(-1e3f64..1e3, 1..20), c in 1e-3f64..10.0) {
            let mut g = set(&v);
            clip_gradients(&mut g, c);
            prop_assert!(g.l2_norm() <= c + 1e-9);
        }

        #[test]
        fn ema_matches_closed_form(t0 in -10f64..10.0, s in -10f64..10.0, d in 0f64..0.9999, n in 1usize..300) {
            let mut t = set(&[t0]);
            let st = set(&[s]);
            for _ in 0..n {
                ema_update(&mut t, &st, d).unwrap();
            }
            let closed = d.powi(n as i32) * t0 + (1.0 - d.powi(n as i32)) * s;
            prop_assert!((t.flatten()[0] - closed).abs() < 1e-10);
        }
    }
}
