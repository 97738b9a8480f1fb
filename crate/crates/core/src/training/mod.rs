//! Two-stage training: auto-encoder pretraining on masks, then segmenter
//! training under the shape-regularized objective, with k-fold
//! cross-validation, checkpoints and run directories.

mod checkpoint;
mod config;
mod cv;
mod optim;
mod stages;

pub use checkpoint::{Checkpoint, EpochSummary, LogRecord, RunDir, TrainingLog};
pub use config::{ExperimentConfig, Optimizer, PriorKind, Stage, TrainConfig, TRAIN_KEYS};
pub use cv::{cross_validate, holdout_split, AuditEntry, CrossValidation, FoldOutcome};
pub use optim::{Adam, ADAM_BETAS, ADAM_EPS};
pub use stages::{
    mean_dice, predict, train_autoencoder, train_segmenter, AutoEncoderTrainer, SegmenterTrainer,
    StepGradients, TrainOutcome,
};
