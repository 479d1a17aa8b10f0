//! Annotated samples, the on-disk dataset layout, patching, augmentation,
//! synthetic data and patient-disjoint splits.

mod augment;
mod loader;
mod patches;
mod sample;
mod split;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::error::ErrorKind;

pub use augment::{apply_affine, augment, AffineParams, AugmentOutcome, AugmentationConfig};
pub use loader::{load_dataset, read_image, save_dataset, DatasetLayout};
pub use patches::{make_patches, patch_origins, stitch, Patch};
pub use sample::{majority_label, majority_vote, AnnotatedSample};
pub use split::{make_split, validation_indices, SplitSpec};
pub use synth::{generate_synthetic, Rule, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Layout { path: PathBuf, message: String },
    #[error("{path}: size {got:?} does not match image size {expected:?}")]
    SizeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid sample: {0}")]
    Sample(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DataError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            DataError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        DataError::Io {
            path: path.into(),
            message: e.to_string(),
        }
    }
}
