use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::bootstrap_example;
use super::curriculum::{sample_nontarget_modes, sample_task, task_probabilities, CurriculumConfig, CurriculumState, TaskCategory};
use super::loss::masked_loss_grad;
use super::optim::{adamw_step, clip_gradients, ema_update, AdamState, TrainConfig};
use crate::denoiser::{Checkpoint, Denoiser, ParameterSet};
use crate::diffusion::{assemble_input, NoiseSchedule, SamplerConfig, TaskSpec, TimestepVector, TrackLatents};
use crate::error::{Error, Result};
use crate::prompt::{PromptTokens, NULL_TOKEN};
use crate::rng::{seeded, StemRng};

/// Clean latents of one sample and its prompt content tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub latents: TrackLatents,
    pub content: Vec<u32>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub loss_single: Option<f64>,
    pub loss_partial: Option<f64>,
    pub loss_joint: Option<f64>,
    pub count_single: usize,
    pub count_partial: usize,
    pub count_joint: usize,
    pub bootstrapped: usize,
    pub lr: f64,
    pub mean_grad_norm: f64,
    pub wall_time_s: f64,
}

impl EpochMetrics {
    pub fn counts(&self) -> [usize; 3] {
        [self.count_single, self.count_partial, self.count_joint]
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

struct ExampleResult {
    loss: f64,
    category: TaskCategory,
    grads: ParameterSet,
    bootstrapped: bool,
}

/// Training state: student weights, EMA teacher, optimizer moments.
pub struct Trainer {
    model: Denoiser,
    ema: ParameterSet,
    adam: AdamState,
    curriculum: CurriculumConfig,
    config: TrainConfig,
    schedule: NoiseSchedule,
    teacher_sampler: SamplerConfig,
    total_steps: u64,
    dump_path: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        model: Denoiser,
        curriculum: CurriculumConfig,
        config: TrainConfig,
        schedule: NoiseSchedule,
        examples: usize,
    ) -> Result<Self> {
        curriculum.validate()?;
        config.validate()?;
        if curriculum.tracks != model.config().tracks {
            return Err(Error::InvalidConfig("curriculum and model disagree on track count".into()));
        }
        if curriculum.total_epochs != config.epochs {
            return Err(Error::InvalidConfig("curriculum and training disagree on epoch count".into()));
        }
        if examples == 0 {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let steps_per_epoch = examples.div_ceil(config.batch_size) as u64;
        Ok(Self {
            ema: model.params().clone(),
            adam: AdamState::new(model.params()),
            model,
            curriculum,
            total_steps: steps_per_epoch * config.epochs as u64,
            config,
            schedule,
            teacher_sampler: SamplerConfig::default(),
            dump_path: None,
        })
    }

    /// Guidance and variance settings the EMA teacher samples with.
    pub fn with_teacher_sampler(mut self, sampler: SamplerConfig) -> Self {
        self.teacher_sampler = sampler;
        self
    }

    /// Where to write the last good state if training diverges.
    pub fn with_dump_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.dump_path = Some(path.into());
        self
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn ema(&self) -> &ParameterSet {
        &self.ema
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            ema: Some(self.ema.clone()),
            step: self.adam.step,
        }
    }

    fn example_step(
        &self,
        ex: &TrainExample,
        state: &CurriculumState,
        teacher: Option<&Denoiser>,
        rng: &mut StemRng,
    ) -> Result<ExampleResult> {
        let k = self.curriculum.tracks;
        let targets = sample_task(state, rng);
        let task = if targets.len() == k {
            TaskSpec::joint(k)
        } else {
            sample_nontarget_modes(k, targets, self.curriculum.p1, rng)?
        };
        let mut x0 = ex.latents.clone();
        let bootstrapped = match teacher {
            Some(t) => bootstrap_example(
                &mut x0,
                &task,
                &ex.content,
                t,
                self.curriculum.p2,
                &self.teacher_sampler,
                &self.schedule,
                rng,
            )?
            .is_some(),
            None => false,
        };
        let big_t = self.schedule.num_steps();
        let t = rng.random_range(1..=big_t);
        let tvec = TimestepVector::for_task(&task, t, big_t)?;
        let noise = TrackLatents::gaussian(x0.shape(), rng);
        let z = assemble_input(&x0, &tvec, &noise, &self.schedule)?;
        let content = if self.config.prompt_dropout > 0.0 && rng.random::<f64>() < self.config.prompt_dropout {
            vec![NULL_TOKEN]
        } else {
            ex.content.clone()
        };
        let prompt = PromptTokens::for_task(targets, &content);
        let pass = self.model.forward_pass(&z, &tvec, &prompt)?;
        let (loss, grad) = masked_loss_grad(pass.prediction(), &noise, targets)?;
        let grads = pass.backward(self.model.params(), &grad)?;
        Ok(ExampleResult {
            loss,
            category: TaskCategory::of(k, targets),
            grads,
            bootstrapped,
        })
    }

    fn diverged(&self, epoch: usize, loss: f64) -> Error {
        if let Some(path) = &self.dump_path {
            match self.checkpoint().save(path) {
                Ok(()) => log::error!("training diverged; state written to {}", path.display()),
                Err(e) => log::error!("training diverged and the state dump failed: {e}"),
            }
        }
        Error::Diverged {
            epoch,
            step: self.adam.step as usize,
            loss,
        }
    }

    /// One pass over `data` in a shuffled order.
    pub fn run_epoch(&mut self, epoch: usize, data: &[TrainExample], rng: &mut StemRng) -> Result<EpochMetrics> {
        let started = Instant::now();
        let state = task_probabilities(&self.curriculum, epoch)?;
        let bootstrap_on = epoch >= self.curriculum.bootstrap_start_epoch() && self.curriculum.p2 > 0.0;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);

        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        let mut bootstrapped = 0;
        let mut grad_norms = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let teacher = if bootstrap_on {
                Some(self.model.with_params(self.ema.clone())?)
            } else {
                None
            };
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let results: Vec<Result<ExampleResult>> = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &seed)| self.example_step(&data[i], &state, teacher.as_ref(), &mut seeded(seed)))
                .collect();

            let mut grads = self.model.params().zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let r = match r {
                    Ok(r) => r,
                    Err(Error::NonFinite(what)) => {
                        log::error!("non-finite value in {what}");
                        return Err(self.diverged(epoch, f64::NAN));
                    }
                    Err(e) => return Err(e),
                };
                grads.add_scaled(&r.grads, 1.0);
                batch_loss += r.loss;
                sums[r.category.index()] += r.loss;
                counts[r.category.index()] += 1;
                bootstrapped += usize::from(r.bootstrapped);
            }
            let n = batch.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() {
                return Err(self.diverged(epoch, batch_loss));
            }
            grads.scale(1.0 / n);
            grad_norms += clip_gradients(&mut grads, self.config.grad_clip);
            lr = self.config.learning_rate(self.adam.step, self.total_steps);
            adamw_step(self.model.params_mut(), &grads, &mut self.adam, &self.config, lr)?;
            ema_update(&mut self.ema, self.model.params(), self.curriculum.ema_decay)?;
            batches += 1;
        }

        let total: usize = counts.iter().sum();
        let mean = |c: usize| (counts[c] > 0).then(|| sums[c] / counts[c] as f64);
        Ok(EpochMetrics {
            epoch,
            loss: sums.iter().sum::<f64>() / total as f64,
            loss_single: mean(0),
            loss_partial: mean(1),
            loss_joint: mean(2),
            count_single: counts[0],
            count_partial: counts[1],
            count_joint: counts[2],
            bootstrapped,
            lr,
            mean_grad_norm: grad_norms / batches as f64,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            model: self.model,
            ema: Some(self.ema),
            step: self.adam.step,
        }
    }
}

/// Settings outside the optimizer and curriculum.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub teacher_sampler: SamplerConfig,
    pub dump_path: Option<PathBuf>,
}

/// Full training run. `on_epoch` sees each metrics record as it is produced.
pub fn train(
    model: Denoiser,
    data: &[TrainExample],
    curriculum: CurriculumConfig,
    config: TrainConfig,
    schedule: NoiseSchedule,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let shape = model.config().latent_shape();
    if let Some(bad) = data.iter().find(|e| e.latents.shape() != shape) {
        return Err(crate::error::shape_mismatch(shape, bad.latents.shape()));
    }
    let mut rng = seeded(config.seed);
    let epochs = config.epochs;
    let mut trainer =
        Trainer::new(model, curriculum, config, schedule, data.len())?.with_teacher_sampler(options.teacher_sampler);
    if let Some(p) = &options.dump_path {
        trainer = trainer.with_dump_path(p);
    }
    let mut metrics = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let m = trainer.run_epoch(epoch, data, &mut rng)?;
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.2e} bootstrapped {} ({:.1}s)",
            m.loss,
            m.lr,
            m.bootstrapped,
            m.wall_time_s
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.into_checkpoint(),
        metrics,
    })
}

