//! Curriculum training: task allocation, masked loss, AdamW, EMA teacher and
//! self-bootstrapping.

mod bootstrap;
mod curriculum;
mod loss;
mod optim;
mod trainer;

pub use bootstrap::{bootstrap_batch, bootstrap_example, BatchItem};
pub use curriculum::{
    sample_nontarget_modes, sample_task, task_probabilities, CurriculumConfig, CurriculumState, TaskCategory,
};
pub use loss::{masked_loss, masked_loss_grad};
pub use optim::{adamw_step, clip_gradients, ema_update, AdamState, LrSchedule, TrainConfig};
pub use trainer::{train, EpochMetrics, TrainExample, TrainOptions, TrainOutcome, Trainer};
