use serde::{Deserialize, Serialize};

use super::DataError;

/// An RGB image with per-annotator binary masks and their majority vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// One `H x W` mask of 0/1 per annotator.
    pub annotations: Vec<Vec<u8>>,
    pub majority: Vec<u8>,
    pub patient_id: String,
    pub organ: Option<String>,
}

pub const CHANNELS: usize = 3;

impl AnnotatedSample {
    /// Validates shapes and computes the majority label.
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        image: Vec<f32>,
        annotations: Vec<Vec<u8>>,
        patient_id: Option<String>,
        organ: Option<String>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        let pixels = height * width;
        if pixels == 0 {
            return Err(DataError::Sample(format!("{id}: empty image")));
        }
        if image.len() != pixels * CHANNELS {
            return Err(DataError::Sample(format!(
                "{id}: image has {} values, expected {}",
                image.len(),
                pixels * CHANNELS
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Sample(format!("{id}: image values outside [0, 1]")));
        }
        if annotations.is_empty() {
            return Err(DataError::Sample(format!("{id}: no annotator masks")));
        }
        for (k, a) in annotations.iter().enumerate() {
            if a.len() != pixels {
                return Err(DataError::Sample(format!("{id}: mask {k} has {} pixels, expected {pixels}", a.len())));
            }
            if a.iter().any(|&v| v > 1) {
                return Err(DataError::Sample(format!("{id}: mask {k} is not binary")));
            }
        }
        let majority = majority_vote(&annotations);
        Ok(Self {
            patient_id: patient_id.unwrap_or_else(|| id.clone()),
            id,
            height,
            width,
            image,
            annotations,
            majority,
            organ,
        })
    }

    pub fn annotators(&self) -> usize {
        self.annotations.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Label for one pixel from its positive vote count out of `annotators`.
/// Positive on a strict majority or an exact tie (even `A`).
pub fn majority_label(votes: usize, annotators: usize) -> u8 {
    u8::from(annotators > 0 && 2 * votes >= annotators)
}

/// Pixelwise majority over equally sized binary masks.
pub fn majority_vote<M: AsRef<[u8]>>(masks: &[M]) -> Vec<u8> {
    let Some(first) = masks.first() else {
        return Vec::new();
    };
    let a = masks.len();
    (0..first.as_ref().len())
        .map(|t| {
            let votes = masks.iter().filter(|m| m.as_ref()[t] != 0).count();
            majority_label(votes, a)
        })
        .collect()
}
