//! Losses, PK sampling, augmentation, the optimizer and the epoch loop.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod sampler;
mod trainer;

pub use augment::{augment_clip, AugmentConfig, Augmentation};
pub use loss::{batch_hard_triplet, label_smooth_ce, total_loss, LossTerms};
pub use optim::{adam_step, Adam, AdamConfig, OptimState, StepSchedule};
pub use sampler::{pk_sample, ClipSource, PkBatch};
pub use trainer::{BatchRecord, EpochReport, EpochSummary, TrainConfig, Trainer};
