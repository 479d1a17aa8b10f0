use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedSample, DataError};

/// Train/test partition by sample id, disjoint by patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Fraction of training patches held out for validation in each run.
    pub val_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        serde_json::from_str(text).map_err(|e| DataError::Config(format!("split file: {e}")))
    }

    /// True when no id and no patient appears on both sides.
    pub fn is_patient_disjoint(&self, samples: &[AnnotatedSample]) -> bool {
        let patient = |id: &String| samples.iter().find(|s| &s.id == id).map(|s| s.patient_id.clone());
        let train_ids: HashSet<_> = self.train.iter().collect();
        if self.test.iter().any(|id| train_ids.contains(id)) {
            return false;
        }
        let train_patients: HashSet<_> = self.train.iter().filter_map(patient).collect();
        self.test.iter().filter_map(patient).all(|p| !train_patients.contains(&p))
    }
}

/// Shuffles patients with `seed` and moves whole patients into the test side
/// until at least `test_fraction` of the samples are there.
pub fn make_split(
    samples: &[AnnotatedSample],
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitSpec, DataError> {
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::Config("split fractions must lie in [0, 1)".into()));
    }
    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in samples {
        by_patient.entry(&s.patient_id).or_default().push(&s.id);
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    if test_fraction > 0.0 && patients.len() < 2 {
        return Err(DataError::Config("a patient-disjoint split needs at least two patients".into()));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let want = (test_fraction * samples.len() as f64).ceil() as usize;
    let mut test = Vec::new();
    let mut train = Vec::new();
    for (k, p) in patients.iter().enumerate() {
        let ids = by_patient[p].iter().map(|s| s.to_string());
        // keep at least one patient for training
        if test.len() < want && k + 1 < patients.len() {
            test.extend(ids);
        } else {
            train.extend(ids);
        }
    }
    train.sort();
    test.sort();
    Ok(SplitSpec {
        train,
        test,
        val_fraction,
        seed,
    })
}

/// Sorted indices of the `fraction` of `count` items held out for validation,
/// drawn with `seed` (at least one when `count > 1` and `fraction > 0`).
pub fn validation_indices(count: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut take = (fraction * count as f64).round() as usize;
    if fraction > 0.0 && count > 1 {
        take = take.clamp(1, count - 1);
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held: Vec<usize> = idx.into_iter().take(take).collect();
    held.sort_unstable();
    held
}
