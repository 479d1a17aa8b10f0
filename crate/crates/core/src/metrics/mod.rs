//! Pooled confusion metrics, inter-annotator agreement and significance testing.

mod anova;
mod confusion;
mod kappa;
mod report;
pub mod special;

use thiserror::Error;

use crate::error::ErrorKind;

pub use anova::{one_way_anova, AnovaResult, SIGNIFICANCE_LEVEL};
pub use confusion::{bacc, confusion, confusion_from_probabilities, f1, precision, sensitivity, specificity, ConfusionCounts, Score};
pub use kappa::{fleiss_kappa, mask_vote_table, FleissAccumulator};
pub use report::{read_runs_csv, write_runs_csv, AnovaVerdict, MetricName, RunReport, RunStatus, RUNS_CSV_COLUMNS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("value {value} at index {index} is not binary")]
    NonBinary { index: usize, value: f64 },
    #[error("length mismatch: prediction has {pred}, target has {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("{0} class is empty; balanced accuracy is undefined")]
    EmptyClass(&'static str),
    #[error("row {row} sums to {sum}, expected {raters} raters")]
    RowSum { row: usize, sum: u64, raters: u32 },
    #[error("Fleiss' kappa needs at least two categories and two raters")]
    TooFewCategories,
    #[error("Fleiss' kappa needs at least two raters, got {0}")]
    TooFewRaters(u32),
    #[error("no items to rate")]
    NoItems,
    #[error("expected agreement is 1 but observed agreement is {0}")]
    DegenerateAgreement(f64),
    #[error("ANOVA needs at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {group} has {len} values; at least two are required")]
    GroupTooSmall { group: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("runs table: {0}")]
    Table(String),
}

impl MetricsError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            MetricsError::NonFinite(_) | MetricsError::DegenerateAgreement(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
