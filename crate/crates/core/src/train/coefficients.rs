use serde::{Deserialize, Serialize};

use super::{Checkpoint, TrainError};
use crate::lefm::ExponentTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermImportance {
    pub index: usize,
    pub label: String,
    pub raw: f64,
    pub abs: f64,
    /// `|a_r| / sum |a|`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub version: String,
    pub config_hash: String,
    pub d: usize,
    pub m: usize,
    /// Sorted by decreasing importance, ties by index.
    pub terms: Vec<TermImportance>,
}

/// Per-term importances of `coefficients`, most important first.
pub fn coefficient_importance<S: AsRef<str>>(
    table: &ExponentTable,
    coefficients: &[f64],
    channel_names: &[S],
) -> Result<Vec<TermImportance>, TrainError> {
    if coefficients.len() != table.terms() {
        return Err(TrainError::Checkpoint(format!(
            "{} coefficients for {} terms",
            coefficients.len(),
            table.terms()
        )));
    }
    let labels = table.labels(channel_names)?;
    let total: f64 = coefficients.iter().map(|a| a.abs()).sum();
    let mut terms: Vec<TermImportance> = coefficients
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(index, (&raw, label))| TermImportance {
            index,
            label,
            raw,
            abs: raw.abs(),
            normalized: if total > 0.0 { raw.abs() / total } else { 0.0 },
        })
        .collect();
    terms.sort_by(|a, b| b.abs.total_cmp(&a.abs).then(a.index.cmp(&b.index)));
    Ok(terms)
}

/// Importance report for the best weights of a checkpoint.
pub fn report_coefficients(checkpoint: &Checkpoint) -> Result<CoefficientReport, TrainError> {
    let (Some(table), Some(coefficients)) = (&checkpoint.table, checkpoint.coefficients()) else {
        return Err(TrainError::Config("checkpoint has no expansion layer (m = 0)".into()));
    };
    let names = table.default_channel_names();
    Ok(CoefficientReport {
        version: crate::VERSION.to_string(),
        config_hash: checkpoint.config_hash.clone(),
        d: table.inputs(),
        m: table.order(),
        terms: coefficient_importance(table, coefficients, &names)?,
    })
}

impl CoefficientReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn top_labels(&self, k: usize) -> Vec<&str> {
        self.terms.iter().take(k).map(|t| t.label.as_str()).collect()
    }
}
