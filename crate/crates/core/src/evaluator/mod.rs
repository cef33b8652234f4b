//! Path-quality evaluation.
//!
//! The greedy filter, the trainer and the evolutionary search only talk to
//! the [`Evaluator`] / [`Trainable`] traits, so the toy supernet and the
//! tabular oracle can be swapped without touching them.

mod checkpoint;
mod dataset;
mod oracle;
mod supernet;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{Dataset, DatasetError, Split, SyntheticSpec};
pub use oracle::{
    make_oracle_space, oracle_loss, OracleBackend, OracleError, OracleSpec, TabularOracle,
};
pub use supernet::{
    cosine_lr, forward_loss, loss_and_gradients, train_step, Gradients, ParamGroup,
    SupernetBackend, SupernetWeights, Tensor, NESTEROV_MOMENTUM,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{Path, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("empty evaluation batch")]
    EmptyBatch,
    #[error("batch index {index} out of range for split of {len} examples")]
    BatchIndex { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient while training path {path} (loss {loss})")]
    NonFiniteGradient { path: Path, loss: f64 },
    #[error("non-finite loss {loss} for path {path}")]
    NonFiniteLoss { path: Path, loss: f64 },
    #[error("learning rate must be finite and non-negative, got {0}")]
    LearningRate(f64),
}

/// Result of scoring one path on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub path: Path,
    pub loss: f64,
    pub accuracy: f64,
    pub num_images: usize,
}

/// Read-only scoring of paths on validation examples.
///
/// Batches are given as positions inside the backend's validation split,
/// `0..val_len()`.
pub trait Evaluator: Sync {
    fn space(&self) -> &SearchSpace;

    fn val_len(&self) -> usize;

    fn evaluate(&self, path: &Path, val_batch: &[usize]) -> Result<EvaluationRecord, EvalError>;
}

/// An evaluator whose shared weights can be optimized one path at a time.
pub trait Trainable: Evaluator {
    fn train_len(&self) -> usize;

    /// One optimizer step on `path` over the given training positions.
    /// Returns the batch loss measured before the update.
    fn train_step(&mut self, path: &Path, train_batch: &[usize], lr: f64)
        -> Result<f64, EvalError>;
}
