use serde::{Deserialize, Serialize};

use super::special::f_distribution_sf;
use super::MetricsError;

/// Significance level used for every verdict.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub significant: bool,
    /// Set when there was no variance at all (every value equal); reported as F = 0, p = 1.
    pub degenerate: bool,
}

/// One-way ANOVA across `groups`.
///
/// Zero within-group variance with distinct group means gives `F = +inf`,
/// `p = 0`.
pub fn one_way_anova<G: AsRef<[f64]>>(groups: &[G]) -> Result<AnovaResult, MetricsError> {
    let k = groups.len();
    if k < 2 {
        return Err(MetricsError::TooFewGroups(k));
    }
    for (group, g) in groups.iter().enumerate() {
        let g = g.as_ref();
        if g.len() < 2 {
            return Err(MetricsError::GroupTooSmall { group, len: g.len() });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite("ANOVA sample"));
        }
    }
    let n: usize = groups.iter().map(|g| g.as_ref().len()).sum();
    let grand = groups.iter().flat_map(|g| g.as_ref()).sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let g = g.as_ref();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (mean - grand) * (mean - grand);
        ss_within += g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    let df_between = k - 1;
    let df_within = n - k;
    // Sums of squares below this scale are rounding noise of the inputs.
    let scale = groups
        .iter()
        .flat_map(|g| g.as_ref())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let noise = (n as f64) * (scale * 1e-14).powi(2);
    let between_zero = ss_between <= noise;
    let within_zero = ss_within <= noise;
    let (f, p, degenerate) = match (between_zero, within_zero) {
        (true, true) => (0.0, 1.0, true),
        (true, false) => (0.0, 1.0, false),
        (false, true) => (f64::INFINITY, 0.0, false),
        (false, false) => {
            let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
            (f, f_distribution_sf(f, df_between as f64, df_within as f64), false)
        }
    };
    Ok(AnovaResult {
        f,
        p,
        df_between,
        df_within,
        significant: p < SIGNIFICANCE_LEVEL,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_fixture() {
        let r = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert!((r.f - 13.5).abs() < 1e-12);
        assert!((r.p - 0.021312).abs() < 1e-3);
        assert_eq!((r.df_between, r.df_within), (1, 4));
        assert!(r.significant);
    }

    #[test]
    fn identical_groups() {
        let r = one_way_anova(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!((r.f, r.p), (0.0, 1.0));
        assert!(!r.significant);
        let r = one_way_anova(&[vec![0.9; 10], vec![0.9; 10]]).unwrap();
        assert_eq!((r.f, r.p, r.degenerate), (0.0, 1.0, true));
    }

    #[test]
    fn zero_within_variance() {
        let r = one_way_anova(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!((r.f, r.p), (f64::INFINITY, 0.0));
        assert!(r.significant);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(one_way_anova(&[vec![1.0, 2.0]]), Err(MetricsError::TooFewGroups(1))));
        assert!(matches!(
            one_way_anova(&[vec![1.0, 2.0], vec![3.0]]),
            Err(MetricsError::GroupTooSmall { group: 1, len: 1 })
        ));
        assert!(one_way_anova(&[vec![1.0, f64::NAN], vec![3.0, 4.0]]).is_err());
    }

    proptest! {
        #[test]
        fn shift_scale_and_permutation_invariance(
            a in proptest::collection::vec(-10.0f64..10.0, 2..8),
            b in proptest::collection::vec(-10.0f64..10.0, 2..8),
            shift in -100.0f64..100.0,
            scale in 0.1f64..10.0,
        ) {
            let base = one_way_anova(&[a.clone(), b.clone()]).unwrap();
            prop_assume!(base.f.is_finite() && base.f > 1e-6);
            let moved = one_way_anova(&[
                a.iter().map(|v| -scale * v + shift).collect::<Vec<_>>(),
                b.iter().map(|v| -scale * v + shift).collect::<Vec<_>>(),
            ]).unwrap();
            prop_assert!((moved.f - base.f).abs() <= 1e-6 * base.f.max(1.0));
            let mut ar = a.clone();
            ar.reverse();
            let perm = one_way_anova(&[ar, b.clone()]).unwrap();
            prop_assert!((perm.f - base.f).abs() <= 1e-9 * base.f.max(1.0));
            prop_assert!((0.0..=1.0).contains(&base.p));
        }
    }
}
