//! Differentiable operators, the MiniUNet host network and its optimizer.

mod conv;
mod graph;
mod optim;
mod params;
mod unet;

use thiserror::Error;

use crate::error::ErrorKind;
use crate::lefm::LefmError;
use crate::{Scalar, Tensor, TensorError};

pub use graph::{Graph, ParamGrads, Var, DICE_SMOOTH};
pub use optim::{
    plateau_lr, AdamState, EarlyStopping, PlateauScheduler, StopDecision, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use params::{Param, ParamId, ParamStore};
pub use unet::{
    expansion_parameter_increase, Expansion, ExpansionNorm, MiniUNet, Mode, NetConfig, NetOutput,
    SegmentationNet, BOTTLENECK_WIDTH, ENCODER_WIDTHS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lefm(#[from] LefmError),
}

impl NnError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            NnError::NonFinite(_) | NnError::Tensor(TensorError::NonFinite(_)) => ErrorKind::Numeric,
            NnError::Shape { .. } | NnError::Tensor(_) => ErrorKind::Data,
            NnError::Config(_) => ErrorKind::Config,
            NnError::Lefm(e) => e.kind(),
        }
    }
}

/// Soft Dice loss (smoothing 1) between a probability map and a binary target.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape {
            what: "dice target",
            expected: pred.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let (inter, denom) = graph::dice_sums(pred.data(), target.data());
    Ok(T::one() - (T::from_f64_lossy(2.0) * inter + T::from_f64_lossy(DICE_SMOOTH)) / denom)
}
