use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::Scalar;

/// Pixel counts pooled over everything evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    #[inline]
    pub fn record(&mut self, pred: bool, target: bool) {
        match (pred, target) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

/// A ratio that falls back to 0 when its denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Score {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Score {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }
}

fn check_binary(values: &[u8]) -> Result<(), MetricsError> {
    match values.iter().position(|&v| v > 1) {
        Some(index) => Err(MetricsError::NonBinary {
            index,
            value: values[index] as f64,
        }),
        None => Ok(()),
    }
}

/// Counts from binary (0/1) prediction and target masks.
pub fn confusion(pred: &[u8], target: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    check_binary(pred)?;
    check_binary(target)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        c.record(p == 1, t == 1);
    }
    Ok(c)
}

/// Thresholds probabilities at 0.5 (`p >= 0.5` is positive) before counting.
pub fn confusion_from_probabilities<T: Scalar>(prob: &[T], target: &[T]) -> Result<ConfusionCounts, MetricsError> {
    if prob.len() != target.len() {
        return Err(MetricsError::LengthMismatch {
            pred: prob.len(),
            target: target.len(),
        });
    }
    let half = T::from_f64_lossy(0.5);
    let mut c = ConfusionCounts::default();
    for (index, (&p, &t)) in prob.iter().zip(target).enumerate() {
        if !p.is_finite() {
            return Err(MetricsError::NonFinite("prediction"));
        }
        if t != T::zero() && t != T::one() {
            return Err(MetricsError::NonBinary {
                index,
                value: t.to_f64_lossy(),
            });
        }
        c.record(p >= half, t == T::one());
    }
    Ok(c)
}

/// `2 TP / (2 TP + FP + FN)`.
pub fn f1(c: &ConfusionCounts) -> Score {
    Score::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `TP / (TP + FP)`.
pub fn precision(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tp, c.tp + c.fp)
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tp, c.tp + c.fn_)
}

/// `TN / (TN + FP)`.
pub fn specificity(c: &ConfusionCounts) -> Score {
    Score::ratio(c.tn, c.tn + c.fp)
}

/// Mean of sensitivity and specificity; both classes must be present in the target.
pub fn bacc(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    if c.tp + c.fn_ == 0 {
        return Err(MetricsError::EmptyClass("positive"));
    }
    if c.tn + c.fp == 0 {
        return Err(MetricsError::EmptyClass("negative"));
    }
    Ok((sensitivity(c).value + specificity(c).value) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counting_examples() {
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 });
        let t = [1, 0, 0, 1, 1];
        let c = confusion(&t, &t).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv: Vec<u8> = t.iter().map(|v| 1 - v).collect();
        let c = confusion(&inv, &t).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(matches!(confusion(&[2], &[1]), Err(MetricsError::NonBinary { index: 0, .. })));
        assert!(confusion(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn f1_examples() {
        let c = ConfusionCounts { tp: 2, tn: 0, fp: 1, fn_: 1 };
        assert!((f1(&c).value - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(f1(&ConfusionCounts { tp: 5, tn: 3, fp: 0, fn_: 0 }).value, 1.0);
        assert_eq!(f1(&ConfusionCounts { tp: 0, tn: 3, fp: 2, fn_: 1 }).value, 0.0);
        let empty = f1(&ConfusionCounts { tp: 0, tn: 3, fp: 0, fn_: 0 });
        assert!(empty.degenerate && empty.value == 0.0);
    }

    #[test]
    fn bacc_examples() {
        assert_eq!(bacc(&ConfusionCounts { tp: 4, tn: 4, fp: 0, fn_: 0 }).unwrap(), 1.0);
        // all-positive predictor on balanced data
        assert_eq!(bacc(&ConfusionCounts { tp: 5, tn: 0, fp: 5, fn_: 0 }).unwrap(), 0.5);
        assert_eq!(bacc(&ConfusionCounts { tp: 3, tn: 2, fp: 2, fn_: 1 }).unwrap(), 0.625);
        assert_eq!(
            bacc(&ConfusionCounts { tp: 0, tn: 2, fp: 2, fn_: 0 }),
            Err(MetricsError::EmptyClass("positive"))
        );
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision(&ConfusionCounts { tp: 3, tn: 0, fp: 0, fn_: 9 }).value, 1.0);
        assert_eq!(precision(&ConfusionCounts { tp: 1, tn: 0, fp: 3, fn_: 0 }).value, 0.25);
        assert_eq!(precision(&ConfusionCounts { tp: 0, tn: 0, fp: 3, fn_: 0 }).value, 0.0);
        assert!(precision(&ConfusionCounts::default()).degenerate);
    }

    #[test]
    fn probability_threshold() {
        let c = confusion_from_probabilities(&[0.5f32, 0.49, 0.9, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 });
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean(tp in 1u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            let (p, r) = (precision(&c).value, sensitivity(&c).value);
            prop_assert!((f1(&c).value - 2.0 * p * r / (p + r)).abs() < 1e-12);
        }

        #[test]
        fn bacc_symmetric_under_label_swap(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let c = ConfusionCounts { tp, tn, fp, fn_ };
            let swapped = ConfusionCounts { tp: tn, tn: tp, fp: fn_, fn_: fp };
            match (bacc(&c), bacc(&swapped)) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a - b).abs() < 1e-15);
                    prop_assert!((0.0..=1.0).contains(&a));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "definedness differs"),
            }
            for s in [f1(&c), precision(&c), sensitivity(&c), specificity(&c)] {
                prop_assert!((0.0..=1.0).contains(&s.value));
            }
        }
    }
}
