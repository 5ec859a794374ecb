use std::collections::BTreeMap;

use rand::Rng;

use super::curriculum::CurriculumConfig;
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule, SamplerConfig, TaskSpec, TrackLatents, TrackSet};
use crate::error::{Error, Result};
use crate::prompt::PromptTokens;

/// One training example as seen by the bootstrap step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub latents: TrackLatents,
    pub task: TaskSpec,
    pub content: Vec<u32>,
}

/// Picks the conditional tracks to replace: each with probability 0.5,
/// redrawn until at least one is chosen.
fn choose_replaced<R: Rng + ?Sized>(conditional: TrackSet, rng: &mut R) -> TrackSet {
    loop {
        let chosen = TrackSet::from_indices(conditional.iter().filter(|_| rng.random::<f64>() < 0.5));
        if !chosen.is_empty() {
            return chosen;
        }
    }
}

/// With probability `p2`, swaps some of the conditional tracks of `latents`
/// for teacher generations conditioned on the remaining ground truth.
/// Returns the replaced set, or `None` if nothing was replaced.
pub fn bootstrap_example<P, R>(
    latents: &mut TrackLatents,
    task: &TaskSpec,
    content: &[u32],
    teacher: &P,
    p2: f64,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Option<TrackSet>>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let conditional = task.conditional();
    if conditional.is_empty() || rng.random::<f64>() >= p2 {
        return Ok(None);
    }
    let k = task.tracks();
    let replaced = choose_replaced(conditional, rng);
    let given = TrackSet::all(k).difference(replaced);
    let teacher_task = TaskSpec::new(k, replaced, given)?;
    let locked: BTreeMap<usize, Vec<f64>> = given.iter().map(|i| (i, latents.track(i).to_vec())).collect();
    let prompt = PromptTokens::for_task(replaced, content);
    let cfg = SamplerConfig {
        seed: rng.random(),
        ..*sampler
    };
    let generated = sample(teacher, &teacher_task, &locked, &prompt, &cfg, schedule, &mut cfg.rng())?;
    for i in replaced.iter() {
        latents.set_track(i, generated.track(i))?;
    }
    Ok(Some(replaced))
}

/// Applies [`bootstrap_example`] to each item once the bootstrap epoch is
/// reached. Returns how many items were modified.
pub fn bootstrap_batch<P, R>(
    batch: &mut [BatchItem],
    teacher: Option<&P>,
    epoch: usize,
    config: &CurriculumConfig,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<usize>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if epoch < config.bootstrap_start_epoch() || config.p2 == 0.0 {
        return Ok(0);
    }
    let teacher = teacher.ok_or_else(|| Error::InvalidInput("bootstrapping needs a teacher model".into()))?;
    let mut changed = 0;
    for item in batch {
        let r = bootstrap_example(
            &mut item.latents,
            &item.task,
            &item.content,
            teacher,
            config.p2,
            sampler,
            schedule,
            rng,
        )?;
        changed += usize::from(r.is_some());
    }
    Ok(changed)
}
