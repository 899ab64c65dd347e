//! Training loops, learning-rate schedule, augmentation and checkpoints.

mod augment;
mod checkpoint;
mod config;
mod schedule;
mod trainer;

pub use augment::{augment, AugmentationConfig, ColorJitter};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{OptimizerConfig, TrainConfig};
pub use schedule::lr_at;
pub use trainer::{
    load_primary_encoder, steps_per_epoch, supervised_predict, train_ssl, train_ssl_samples, train_supervised,
    train_supervised_samples, EpochRecord, RunSpec, StepRecord, TrainLog, TrainOutcome, HEAD_PREFIX, SSL_CHECKPOINT,
    SUPERVISED_CHECKPOINT,
};
