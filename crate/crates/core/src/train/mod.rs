//! Seeded training runs, checkpoints, multi-run experiments and reports.

mod checkpoint;
mod coefficients;
mod config;
mod experiment;
mod trainer;

use thiserror::Error;

use crate::data::DataError;
use crate::error::ErrorKind;
use crate::lefm::LefmError;
use crate::metrics::MetricsError;
use crate::nn::NnError;

pub use checkpoint::{AdamRecord, Checkpoint, EpochRecord, NetSnapshot, ParamRecord, RunningRecord, CHECKPOINT_FORMAT};
pub use coefficients::{coefficient_importance, report_coefficients, CoefficientReport, TermImportance};
pub use config::{content_hash, Precision, TrainConfig};
pub use experiment::{mean_std, run_experiment, summarize, worker_threads, ArmSummary, ExperimentSummary, MeanStd, TESTED_METRICS};
pub use trainer::{batch_tensors, evaluate, predict_image, stream_rng, train_one, RunOutcome, TrainHooks, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Lefm(#[from] LefmError),
}

impl TrainError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TrainError::Config(_) => ErrorKind::Config,
            TrainError::Diverged { .. } => ErrorKind::Numeric,
            TrainError::Checkpoint(_) | TrainError::Io(_) => ErrorKind::Data,
            TrainError::Data(e) => e.kind(),
            TrainError::Nn(e) => e.kind(),
            TrainError::Metrics(e) => e.kind(),
            TrainError::Lefm(e) => e.kind(),
        }
    }

    /// Failures that end one run but not the whole experiment.
    pub fn is_run_failure(&self) -> bool {
        self.kind() == ErrorKind::Numeric
    }
}

/// Report name of an arm: `baseline` for `m = 0`, else `lefm_m<m>`.
pub fn model_name(m: usize) -> String {
    if m == 0 {
        "baseline".to_string()
    } else {
        format!("lefm_m{m}")
    }
}
