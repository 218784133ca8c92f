//! Optimization: Adam, the seeded training loop for every model kind,
//! validation-based model selection, checkpoints and metrics logs.

mod adam;
mod checkpoint;
mod config;
mod trainer;

use std::io;

use thiserror::Error;

use crate::autodiff::TapeError;
use crate::eval::EvalError;
use crate::rnn::{Model, ModelConfig, Segment};
use crate::scalar::Scalar;

pub use adam::{adam_step, clip_global_norm, OptimizerState, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, CheckpointError, ResumeState, MAGIC};
pub use config::{ConfigError, ModelKind, TrainConfig};
pub use trainer::{StepRecord, TrainOutcome, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("architecture mismatch: config has {expected:?}, parameters have {found:?}")]
    ArchitectureMismatch { expected: ModelConfig, found: ModelConfig },
    #[error("objective became non-finite at step {step}")]
    NonFiniteObjective { step: u64 },
    #[error("non-finite gradient for {name} at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("checkpoint has no resume state")]
    NotResumable,
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing metrics: {0}")]
    Io(#[from] io::Error),
}

/// Unsupervised pre-training (`vae` or `ae`) on `train`, selecting the
/// parameters with the best AP on `validation` (if it has two or more
/// segments).
pub fn pretrain_vae<S: Scalar>(
    config: TrainConfig,
    train: &[Segment<S>],
    validation: &[Segment<S>],
    metrics: &mut dyn io::Write,
) -> Result<TrainOutcome<S>, TrainError> {
    if config.kind.uses_pairs() {
        return Err(TrainError::Data(format!("{} is not a pre-training objective", config.kind)));
    }
    Trainer::new(config, train, &[], validation, None)?.run(metrics)
}

/// Correspondence training on `pairs` (indices into `segments`), starting
/// from `init` or from fresh parameters.
pub fn train_correspondence<S: Scalar>(
    config: TrainConfig,
    segments: &[Segment<S>],
    pairs: &[(usize, usize)],
    validation: &[Segment<S>],
    init: Option<&Model<S>>,
    metrics: &mut dyn io::Write,
) -> Result<TrainOutcome<S>, TrainError> {
    if !config.kind.uses_pairs() {
        return Err(TrainError::Data(format!("{} is not a correspondence objective", config.kind)));
    }
    Trainer::new(config, segments, pairs, validation, init)?.run(metrics)
}
