//! Fleiss' kappa for a fixed number of raters over many items.

use super::MetricsError;

/// Streaming form of Fleiss' kappa: items are added one row at a time, so
/// whole images (millions of pixels) never need a materialized table.
#[derive(Debug, Clone, PartialEq)]
pub struct FleissAccumulator {
    raters: u32,
    items: u64,
    /// Sum over items of `sum_j n_ij^2 - A`.
    agreement_sum: f64,
    category_totals: Vec<u64>,
}

impl FleissAccumulator {
    pub fn new(categories: usize, raters: u32) -> Result<Self, MetricsError> {
        if categories < 2 {
            return Err(MetricsError::TooFewCategories);
        }
        if raters < 2 {
            return Err(MetricsError::TooFewRaters(raters));
        }
        Ok(Self {
            raters,
            items: 0,
            agreement_sum: 0.0,
            category_totals: vec![0; categories],
        })
    }

    /// Adds one item given its per-category vote counts.
    pub fn add_item(&mut self, counts: &[u32]) -> Result<(), MetricsError> {
        if counts.len() != self.category_totals.len() {
            return Err(MetricsError::TooFewCategories);
        }
        let sum: u64 = counts.iter().map(|&c| c as u64).sum();
        if sum != self.raters as u64 {
            return Err(MetricsError::RowSum {
                row: self.items as usize,
                sum,
                raters: self.raters,
            });
        }
        let sq: u64 = counts.iter().map(|&c| (c as u64) * (c as u64)).sum();
        self.agreement_sum += (sq - self.raters as u64) as f64;
        for (t, &c) in self.category_totals.iter_mut().zip(counts) {
            *t += c as u64;
        }
        self.items += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &FleissAccumulator) {
        assert_eq!(self.raters, other.raters);
        assert_eq!(self.category_totals.len(), other.category_totals.len());
        self.items += other.items;
        self.agreement_sum += other.agreement_sum;
        for (a, b) in self.category_totals.iter_mut().zip(&other.category_totals) {
            *a += b;
        }
    }

    pub fn items(&self) -> u64 {
        self.items
    }

    pub fn kappa(&self) -> Result<f64, MetricsError> {
        if self.items == 0 {
            return Err(MetricsError::NoItems);
        }
        let a = self.raters as f64;
        let n = self.items as f64;
        let p_bar = self.agreement_sum / (n * a * (a - 1.0));
        let total = n * a;
        let p_e: f64 = self
            .category_totals
            .iter()
            .map(|&t| {
                let p = t as f64 / total;
                p * p
            })
            .sum();
        if (1.0 - p_e).abs() < 1e-15 {
            return if (p_bar - 1.0).abs() < 1e-15 {
                Ok(1.0)
            } else {
                Err(MetricsError::DegenerateAgreement(p_bar))
            };
        }
        Ok((p_bar - p_e) / (1.0 - p_e))
    }
}

/// Fleiss' kappa of an `N x C` table of vote counts with `raters` votes per row.
pub fn fleiss_kappa<R: AsRef<[u32]>>(votes: &[R], raters: u32) -> Result<f64, MetricsError> {
    let categories = votes.first().ok_or(MetricsError::NoItems)?.as_ref().len();
    let mut acc = FleissAccumulator::new(categories, raters)?;
    for row in votes {
        acc.add_item(row.as_ref())?;
    }
    acc.kappa()
}

/// Per-pixel agreement of binary annotator masks, as an accumulator over
/// the two categories {negative, positive}.
pub fn mask_vote_table(masks: &[&[u8]]) -> Result<FleissAccumulator, MetricsError> {
    let raters = masks.len() as u32;
    let mut acc = FleissAccumulator::new(2, raters)?;
    let len = masks[0].len();
    for m in masks {
        if m.len() != len {
            return Err(MetricsError::LengthMismatch {
                pred: m.len(),
                target: len,
            });
        }
    }
    for px in 0..len {
        let mut positive = 0u32;
        for (k, m) in masks.iter().enumerate() {
            match m[px] {
                0 => {}
                1 => positive += 1,
                v => {
                    return Err(MetricsError::NonBinary {
                        index: k * len + px,
                        value: v as f64,
                    })
                }
            }
        }
        acc.add_item(&[raters - positive, positive])?;
    }
    Ok(acc)
}
