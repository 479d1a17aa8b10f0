//! Learnable explicit feature maps (LEFM) for pixelwise segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`lefm`]: monomial enumeration and the learnable expansion layer with
//!   analytic gradients.
//! - [`nn`]: a tape-based reverse-mode engine, the MiniUNet host network,
//!   soft Dice loss, Adam and learning-rate scheduling.
//! - [`data`]: multi-annotator dataset loading, majority vote, patches,
//!   augmentation and a synthetic generator.
//! - [`metrics`]: pooled confusion metrics, Fleiss' kappa and one-way ANOVA.
//! - [`train`]: seeded runs, checkpoints, A/B experiments and coefficient
//!   importance reports.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod data;
pub mod error;
pub mod lefm;
pub mod metrics;
pub mod nn;
mod scalar;
mod tensor;
pub mod train;

pub use error::ErrorKind;
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type LefmLayer32 = lefm::LefmLayer<f32>;
pub type LefmLayer64 = lefm::LefmLayer<f64>;
pub type SegmentationNet32 = nn::SegmentationNet<f32>;
pub type SegmentationNet64 = nn::SegmentationNet<f64>;
pub type AdamState32 = nn::AdamState<f32>;
pub type AdamState64 = nn::AdamState<f64>;

/// Crate version, stamped into every emitted report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
