//! Desk-scale trainer and synthetic two-domain task suite.
//!
//! A small classifier stands in for the language model: held-out NLL and
//! accuracy on the source domain measure forgetting, the same metrics on the
//! target domain measure learning.

use std::path::PathBuf;

use thiserror::Error;

mod data;
mod embed;
mod experiment;
mod model;
mod optim;
mod train;
mod variance;

pub use data::{
    default_mixture, load_corpus, load_samples, make_domain_pair, probe_accuracy, save_samples, write_corpus,
    CorpusLayout, DomainPairConfig, Sample, SyntheticDomainPair, DEFAULT_SHIFT, MAX_CROSS_DOMAIN_ACCURACY,
    SOURCE_DATASET, TARGET_DATASET,
};
pub use embed::{extend_embeddings, NewRow};
pub use experiment::{prepare_experiment, Experiment, ExperimentConfig, RunMetrics, SOURCE_EVAL, TARGET_EVAL};
pub use model::{evaluate, log_softmax, Architecture, EvalMetrics, ToyModel};
pub use optim::{lr_schedule, AdamW, OptimizerConfig};
pub use train::{train, train_samples, ToyTrainer};
pub use variance::{variance_reduction_trial, NoisyTaskVectorEnsemble, VarianceReport};

use crate::checkpoint::CheckpointError;
use crate::slice::SliceError;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] SliceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("input dimension mismatch: model expects {expected}, sample has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("no samples")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("domain shift check failed after {attempts} attempts: cross-domain accuracy {accuracy:.3}")]
    ShiftCheckFailed { accuracy: f64, attempts: usize },
    #[error("embedding extension: {0}")]
    Embedding(String),
    #[error("K = {k} exceeds the {available} samples per trial")]
    TooFewSamples { k: usize, available: usize },
}
