//! Learnable explicit feature map.
//!
//! Each pixel's feature vector `x` (length `d`) is expanded into the `D`
//! monomials of total degree `<= m`, and each monomial is scaled by one
//! learnable coefficient shared across all spatial locations:
//! `phi(x) = psi(x) ⊙ a`.

mod exponents;
mod layer;

use thiserror::Error;

use crate::error::ErrorKind;

pub use exponents::{binomial, term_count, ExponentTable, MAX_INPUTS, MAX_ORDER, MAX_TERMS};
pub use layer::{LefmGradients, LefmLayer, TermNorm};
pub(crate) use layer::{expand_backward_into, expand_into, PixelLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LefmError {
    #[error("input feature count d = {0} outside 1..={max}", max = MAX_INPUTS)]
    InvalidInputs(usize),
    #[error("expansion order m = {0} outside 1..={max}", max = MAX_ORDER)]
    InvalidOrder(usize),
    #[error("C(d+m, m) for d = {inputs}, m = {order} exceeds {max} terms", max = MAX_TERMS)]
    TooManyTerms { inputs: usize, order: usize },
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

impl LefmError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            LefmError::NonFinite(_) => ErrorKind::Numeric,
            LefmError::ShapeMismatch { .. } => ErrorKind::Data,
            _ => ErrorKind::Config,
        }
    }
}
