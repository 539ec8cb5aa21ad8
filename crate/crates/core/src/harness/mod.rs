//! Training, evaluation, sampling, variance emission and ablation sweeps,
//! driven by [`RunConfig`].

mod config;
mod eval;
mod optim;
mod sweep;
mod train;

pub use config::{
    ablation, cue_subsets, Ablation, DataConfig, Decision, EvalConfig, OptimConfig, OptimizerKind, ReportMode,
    RunConfig, ABLATIONS,
};
pub use eval::{
    build_model, emit_variance_csv, evaluate, evaluate_on, generate_split, load_checkpoint, sample_records,
    write_samples, GenerationRecord, Split,
};
pub use optim::Optimizer;
pub use sweep::{run_sweep, SweepAxes, SweepManifest, SweepPoint};
pub use train::{train, train_on, training_pairs, EpochLog, TrainOutcome};

use thiserror::Error;

use crate::cues::DatasetError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::nn::CheckpointError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read config {0}")]
    ConfigNotFound(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("dataset does not match the model: {0}")]
    DatasetMismatch(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (examples {ids:?})")]
    NonFinite { epoch: usize, batch: usize, ids: Vec<usize> },
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => HarnessError::DatasetMismatch(m),
            other => HarnessError::Model(other),
        }
    }
}

impl From<crate::tensor::TensorError> for HarnessError {
    fn from(e: crate::tensor::TensorError) -> Self {
        HarnessError::Model(ModelError::Tensor(e))
    }
}

impl HarnessError {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            HarnessError::ConfigNotFound(_) => "CONFIG_NOT_FOUND",
            HarnessError::Config(_) => "CONFIG_INVALID",
            HarnessError::Dataset(DatasetError::NotFound(_)) => "DATASET_NOT_FOUND",
            HarnessError::Dataset(DatasetError::Config(_)) => "CONFIG_INVALID",
            HarnessError::Dataset(_) => "DATASET_INVALID",
            HarnessError::DatasetMismatch(_) => "DATASET_MISMATCH",
            HarnessError::CheckpointNotFound(_) => "CHECKPOINT_NOT_FOUND",
            HarnessError::Checkpoint(CheckpointError::ShapeMismatch(_)) => "CHECKPOINT_MISMATCH",
            HarnessError::Checkpoint(_) => "CHECKPOINT_INVALID",
            HarnessError::NonFinite { .. } => "NON_FINITE_LOSS",
            HarnessError::Model(_) => "MODEL_ERROR",
            HarnessError::Metric(_) => "METRIC_ERROR",
            HarnessError::Io(_) => "IO_ERROR",
            HarnessError::Usage(_) => "USAGE",
        }
    }

    /// `CLASS: message` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string();
        let msg: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("{}: {}", self.class(), msg.join("; "))
    }
}
