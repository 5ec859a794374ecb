use rand::Rng;
use rayon::prelude::*;

use super::{init_params, Denoiser, DenoiserConfig};
use crate::diffusion::{TimestepVector, TrackLatents};
use crate::error::Result;
use crate::prompt::PromptTokens;
use crate::rng::{gaussian_vec, seeded};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: (String, usize),
    pub failures: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares every parameter gradient against central differences of the
/// scalar loss `Σ w ⊙ forward(z)` for a random `w`.
///
/// Parameters are perturbed away from their initial values (including the
/// zero output convolution) so that every path through the network carries
/// gradient.
pub fn gradient_check(config: &DenoiserConfig, seed: u64, step: f64, tolerance: f64) -> Result<GradcheckReport> {
    let mut rng = seeded(seed);
    let mut params = init_params(config, &mut rng)?;
    for v in params.values_mut() {
        *v += 0.3 * gaussian_vec(&mut rng, 1)[0];
    }
    let model = Denoiser::from_parameters(*config, params)?;

    let shape = config.latent_shape();
    let z = TrackLatents::gaussian(shape, &mut rng);
    let num_steps = 100;
    let steps: Vec<usize> = (0..config.tracks)
        .map(|i| match i % 3 {
            0 => 37,
            1 => 0,
            _ => num_steps,
        })
        .collect();
    let tvec = TimestepVector::new(steps, num_steps)?;
    let content: Vec<u32> = (0..3).map(|_| rng.random_range(0..config.prompt_vocab_size as u32)).collect();
    let prompt = PromptTokens::new(rng.random_range(0..config.prompt_vocab_size as u32), content);
    let w = TrackLatents::from_vec(shape, gaussian_vec(&mut rng, shape.len()))?;

    let analytic = model.backward(&z, &tvec, &prompt, &w)?;
    let output = |m: &Denoiser| m.forward(&z, &tvec, &prompt);

    let coords: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.len()).map(move |i| (p, i)))
        .collect();
    let errs: Vec<Result<f64>> = coords
        .par_iter()
        .map(|&(p, i)| {
            let mut m = model.clone();
            let orig = m.params().iter().nth(p).unwrap().data[i];
            m.params_mut().iter_mut().nth(p).unwrap().data[i] = orig + step;
            let up = output(&m)?;
            m.params_mut().iter_mut().nth(p).unwrap().data[i] = orig - step;
            let down = output(&m)?;
            // Differencing the outputs before weighting keeps the summation
            // from amplifying cancellation error.
            let numeric = up
                .data()
                .iter()
                .zip(down.data())
                .zip(w.data())
                .map(|((a, b), wi)| (a - b) * wi)
                .sum::<f64>()
                / (2.0 * step);
            let exact = analytic.iter().nth(p).unwrap().data[i];
            Ok(rel_err(exact, numeric))
        })
        .collect();

    let mut report = GradcheckReport {
        checked: coords.len(),
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        failures: 0,
        tolerance,
    };
    for (&(p, i), e) in coords.iter().zip(errs) {
        let e = e?;
        if e >= tolerance {
            report.failures += 1;
        }
        if e > report.max_rel_err || report.worst.0.is_empty() {
            report.max_rel_err = e;
            report.worst = (model.params().iter().nth(p).unwrap().name.clone(), i);
        }
    }
    Ok(report)
}
