//! Optimisation, losses, feature pipeline and synthetic tasks.

pub mod batch;
pub mod features;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod toy;
pub mod trainer;

pub use batch::{FeatureBatch, TokenBatch, EOS, PAD, SOS};
pub use features::{spec_augment, stack_and_downsample, SpecAugmentConfig};
pub use loss::label_smoothed_ce;
pub use optim::{adam_step, clip_global_norm, Adam, AdamConfig};
pub use schedule::{decay_branch, lr_schedule, warmup_branch};
pub use toy::{make_toy_task, Example, ToyKind, ToyTaskConfig};
pub use trainer::{make_batch, make_eval_batch, Dataset, MetricsRow, TrainSummary, Trainer, TrainingConfig};
