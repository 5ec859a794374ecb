use crate::diffusion::latents::{TimestepVector, TrackLatents};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{shape_mismatch, Error, Result};

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_mismatch(a.len(), b.len()));
    }
    Ok(())
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · eps`, elementwise.
pub fn forward_diffuse(z0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(z0, eps)?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| signal * x + noise * e)
        .collect())
}

/// Reverse-step mean `(1/√α_t) · (z_t − β_t/√(1 − ᾱ_t) · eps_hat)`.
pub fn posterior_mean(z_t: &[f64], eps_hat: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(z_t, eps_hat)?;
    schedule.check_step(t)?;
    if !z_t.iter().chain(eps_hat).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("posterior_mean input".into()));
    }
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(z_t
        .iter()
        .zip(eps_hat)
        .map(|(&z, &e)| inv_sqrt_alpha * (z - coef * e))
        .collect())
}

/// Builds the denoiser input track by track: clean at `t_i = 0`, the noise
/// block at `t_i = T`, and the forward-diffused latent in between.
pub fn assemble_input(
    clean: &TrackLatents,
    tvec: &TimestepVector,
    noise: &TrackLatents,
    schedule: &NoiseSchedule,
) -> Result<TrackLatents> {
    let shape = clean.shape();
    noise.check_shape(shape)?;
    if tvec.len() != shape.tracks {
        return Err(Error::InvalidTimesteps(format!(
            "{} entries for {} tracks",
            tvec.len(),
            shape.tracks
        )));
    }
    let big_t = schedule.num_steps();
    tvec.validate(big_t)?;
    let mut out = TrackLatents::zeros(shape);
    for (i, &t) in tvec.steps().iter().enumerate() {
        if t == 0 {
            out.track_mut(i).copy_from_slice(clean.track(i));
        } else if t == big_t {
            out.track_mut(i).copy_from_slice(noise.track(i));
        } else {
            let z = forward_diffuse(clean.track(i), t, noise.track(i), schedule)?;
            out.track_mut(i).copy_from_slice(&z);
        }
    }
    Ok(out)
}

/// Classifier-free guidance: `(1 − λ) · eps_marginal + λ · eps_conditional`.
pub fn cfg_combine(eps_marginal: &[f64], eps_conditional: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_len(eps_marginal, eps_conditional)?;
    Ok(eps_marginal
        .iter()
        .zip(eps_conditional)
        .map(|(&m, &c)| (1.0 - lambda) * m + lambda * c)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::latents::LatentShape;
    use crate::rng::{gaussian_vec, seeded};

    /// Schedule whose first step has α = 0.9 and ᾱ = 0.9.
    fn first_step_09() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn forward_hand_value() {
        // ᾱ = 0.25: a two-step schedule with β = 0.5 at both steps.
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-15);
        let out = forward_diffuse(&[2.0], 2, &[1.0], &s).unwrap();
        assert!((out[0] - 1.8660254037844386).abs() < 1e-12);
    }

    #[test]
    fn forward_zero_noise_is_scaled_signal() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        for t in 1..=10 {
            let out = forward_diffuse(&[1.5, -0.25], t, &[0.0, 0.0], &s).unwrap();
            assert_eq!(out[0], s.alpha_bar(t).sqrt() * 1.5);
            assert_eq!(out[1], s.alpha_bar(t).sqrt() * -0.25);
        }
    }

    #[test]
    fn forward_saturated_is_noise() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = seeded(3);
        let z0 = gaussian_vec(&mut rng, 64);
        let eps = gaussian_vec(&mut rng, 64);
        let out = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
        let dist: f64 = out.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let z_norm: f64 = z0.iter().map(|v| v * v).sum::<f64>().sqrt();
        // |out − eps| ≤ √ᾱ|z0| + (1 − √(1 − ᾱ))|eps|; the second term is O(ᾱ).
        let eps_norm: f64 = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ab = s.alpha_bar(1000);
        assert!(dist <= ab.sqrt() * z_norm + (1.0 - (1.0 - ab).sqrt()) * eps_norm + 1e-12);
    }

    #[test]
    fn forward_rejects_bad_args() {
        let s = first_step_09();
        assert!(forward_diffuse(&[1.0], 1, &[1.0, 2.0], &s).is_err());
        assert!(forward_diffuse(&[1.0], 0, &[1.0], &s).is_err());
        assert!(forward_diffuse(&[1.0], 3, &[1.0], &s).is_err());
    }

    #[test]
    fn posterior_hand_value() {
        let s = first_step_09();
        let m = posterior_mean(&[1.0], &[0.5], 1, &s).unwrap();
        // (1/√0.9)(1 − 0.1/√0.1 · 0.5)
        assert!((m[0] - 0.8874258867227931).abs() < 1e-12);
        let m0 = posterior_mean(&[1.0], &[0.0], 1, &s).unwrap();
        assert_eq!(m0[0], 1.0 / 0.9f64.sqrt());
    }

    #[test]
    fn posterior_matches_exact_ddpm_posterior() {
        // With eps_hat equal to the true noise, the mean equals
        // E[z_{t-1} | z_t, z0] = c0·z0 + ct·z_t.
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        for &t in &[2usize, 17, 50] {
            let (z0, eps) = (0.7, -1.3);
            let zt = forward_diffuse(&[z0], t, &[eps], &s).unwrap()[0];
            let got = posterior_mean(&[zt], &[eps], t, &s).unwrap()[0];
            let (ab, ab_prev, beta, alpha) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t), s.alpha(t));
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let expect = c0 * z0 + ct * zt;
            assert!((got - expect).abs() < 1e-12, "t={t}: {got} vs {expect}");
        }
    }

    #[test]
    fn posterior_rejects_non_finite() {
        let s = first_step_09();
        assert!(posterior_mean(&[f64::NAN], &[0.0], 1, &s).is_err());
        assert!(posterior_mean(&[0.0], &[f64::INFINITY], 1, &s).is_err());
        assert!(posterior_mean(&[0.0], &[0.0], 5, &s).is_err());
    }

    fn blocks(seed: u64) -> (TrackLatents, TrackLatents) {
        let shape = LatentShape::new(4, 3, 5);
        let mut rng = seeded(seed);
        (TrackLatents::gaussian(shape, &mut rng), TrackLatents::gaussian(shape, &mut rng))
    }

    #[test]
    fn assemble_three_cases() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let (clean, noise) = blocks(1);
        let tv = TimestepVector::new(vec![20, 0, 7, 20], 20).unwrap();
        let z = assemble_input(&clean, &tv, &noise, &s).unwrap();
        assert_eq!(z.track(0), noise.track(0));
        assert_eq!(z.track(1), clean.track(1));
        assert_eq!(z.track(2), forward_diffuse(clean.track(2), 7, noise.track(2), &s).unwrap().as_slice());
        assert_eq!(z.track(3), noise.track(3));
    }

    #[test]
    fn assemble_extremes_are_bit_identical() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let (clean, noise) = blocks(2);
        let zc = assemble_input(&clean, &TimestepVector::new(vec![0; 4], 20).unwrap(), &noise, &s).unwrap();
        assert_eq!(zc, clean);
        let zn = assemble_input(&clean, &TimestepVector::new(vec![20; 4], 20).unwrap(), &noise, &s).unwrap();
        assert_eq!(zn, noise);
    }

    #[test]
    fn assemble_rejects_invalid_vector() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let (clean, noise) = blocks(3);
        let bad = TimestepVector(vec![3, 4, 0, 20]);
        assert!(assemble_input(&clean, &bad, &noise, &s).is_err());
        let short = TimestepVector(vec![0, 0]);
        assert!(assemble_input(&clean, &short, &noise, &s).is_err());
    }

    #[test]
    fn cfg_identities() {
        let m = [0.3, -1.2, 4.0];
        let c = [1.1, 0.5, -2.0];
        assert_eq!(cfg_combine(&m, &c, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_combine(&m, &c, 0.0).unwrap(), m.to_vec());
        assert_eq!(cfg_combine(&[0.0], &[1.0], 7.0).unwrap(), vec![7.0]);
        assert!(cfg_combine(&m, &c[..2], 1.0).is_err());
    }
}
