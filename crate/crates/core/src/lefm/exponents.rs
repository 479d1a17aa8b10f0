//! Monomial exponent enumeration for the explicit feature map.
//!
//! An [`ExponentTable`] lists every exponent vector `q` with `sum(q) <= m`
//! for `d` input features, in graded lexicographic order: total degree
//! ascending, and within one degree the exponent tuples in descending
//! lexicographic order (`x1^2` before `x1 x2` before `x2^2`). Row 0 is
//! always the constant term.

use serde::{Deserialize, Serialize};

use super::LefmError;

pub const MAX_INPUTS: usize = 16;
pub const MAX_ORDER: usize = 8;
pub const MAX_TERMS: usize = 100_000;

/// Binomial coefficient `C(n, k)`, or `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    u64::try_from(acc).ok()
}

/// Number of monomials of total degree `<= order` in `inputs` variables.
pub fn term_count(inputs: usize, order: usize) -> Option<u64> {
    binomial((inputs + order) as u64, order as u64)
}

/// Ordered monomial exponents together with the term/power masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExponentTable {
    inputs: usize,
    order: usize,
    /// Row-major `terms x inputs` exponents; doubles as the power mask.
    powers: Vec<u32>,
    /// Row-major `terms x inputs` selectors: 1 where the feature takes part.
    term_mask: Vec<u8>,
}

impl ExponentTable {
    /// Enumerates all exponent vectors for `inputs` features up to total degree `order`.
    pub fn enumerate(inputs: usize, order: usize) -> Result<Self, LefmError> {
        if !(1..=MAX_INPUTS).contains(&inputs) {
            return Err(LefmError::InvalidInputs(inputs));
        }
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(LefmError::InvalidOrder(order));
        }
        let terms = term_count(inputs, order)
            .filter(|&t| t <= MAX_TERMS as u64)
            .ok_or(LefmError::TooManyTerms { inputs, order })? as usize;

        let mut powers = Vec::with_capacity(terms * inputs);
        let mut current = vec![0u32; inputs];
        for degree in 0..=order as u32 {
            compositions(degree, 0, &mut current, &mut powers);
        }
        debug_assert_eq!(powers.len(), terms * inputs);
        let term_mask = powers.iter().map(|&q| u8::from(q > 0)).collect();
        Ok(Self {
            inputs,
            order,
            powers,
            term_mask,
        })
    }

    /// Input feature count `d`.
    pub fn inputs(&self) -> usize {
        self.inputs
    }

    /// Expansion order `m`.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of terms `D = C(d + m, m)`.
    pub fn terms(&self) -> usize {
        self.powers.len() / self.inputs
    }

    pub fn exponent(&self, term: usize) -> &[u32] {
        &self.powers[term * self.inputs..(term + 1) * self.inputs]
    }

    pub fn exponents(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        self.powers.chunks_exact(self.inputs)
    }

    /// Row-major `D x d` power mask (identical to the exponents).
    pub fn power_mask(&self) -> &[u32] {
        &self.powers
    }

    /// Row-major `D x d` term mask of base selectors.
    pub fn term_mask(&self) -> &[u8] {
        &self.term_mask
    }

    pub fn degree(&self, term: usize) -> u32 {
        self.exponent(term).iter().sum()
    }

    /// Human-readable monomial labels, one per term ("1", "R", "RG", "B²", ...).
    pub fn labels<S: AsRef<str>>(&self, channel_names: &[S]) -> Result<Vec<String>, LefmError> {
        if channel_names.len() != self.inputs {
            return Err(LefmError::ShapeMismatch {
                what: "channel names",
                expected: self.inputs,
                got: channel_names.len(),
            });
        }
        Ok(self
            .exponents()
            .map(|q| monomial_label(q, channel_names))
            .collect())
    }

    /// Default channel names: `R, G, B` for three inputs, `x1..xd` otherwise.
    pub fn default_channel_names(&self) -> Vec<String> {
        if self.inputs == 3 {
            ["R", "G", "B"].iter().map(|s| s.to_string()).collect()
        } else {
            (1..=self.inputs).map(|i| format!("x{i}")).collect()
        }
    }
}

fn compositions(remaining: u32, pos: usize, current: &mut [u32], out: &mut Vec<u32>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.extend_from_slice(current);
        return;
    }
    for q in (0..=remaining).rev() {
        current[pos] = q;
        compositions(remaining - q, pos + 1, current, out);
    }
    current[pos] = 0;
}

fn superscript(power: u32) -> String {
    const DIGITS: [char; 10] = ['⁰', '¹', '²', '³', '⁴', '⁵', '⁶', '⁷', '⁸', '⁹'];
    power
        .to_string()
        .chars()
        .map(|c| DIGITS[c.to_digit(10).unwrap() as usize])
        .collect()
}

fn monomial_label<S: AsRef<str>>(exponent: &[u32], names: &[S]) -> String {
    let mut label = String::new();
    for (&q, name) in exponent.iter().zip(names) {
        if q == 0 {
            continue;
        }
        label.push_str(name.as_ref());
        if q > 1 {
            label.push_str(&superscript(q));
        }
    }
    if label.is_empty() {
        label.push('1');
    }
    label
}

#[derive(Serialize, Deserialize)]
struct TableDocument {
    d: usize,
    m: usize,
    #[serde(rename = "D")]
    terms: usize,
    exponents: Vec<Vec<u32>>,
}

impl Serialize for ExponentTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TableDocument {
            d: self.inputs,
            m: self.order,
            terms: self.terms(),
            exponents: self.exponents().map(<[u32]>::to_vec).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ExponentTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let doc = TableDocument::deserialize(deserializer)?;
        let table = ExponentTable::enumerate(doc.d, doc.m).map_err(D::Error::custom)?;
        if doc.terms != table.terms() {
            return Err(D::Error::custom(format!(
                "D = {} does not match C(d+m, m) = {}",
                doc.terms,
                table.terms()
            )));
        }
        let ordered = doc.exponents.len() == table.terms()
            && doc.exponents.iter().zip(table.exponents()).all(|(a, b)| a == b);
        if !ordered {
            return Err(D::Error::custom(
                "exponents are not the graded-lexicographic enumeration for (d, m)",
            ));
        }
        Ok(table)
    }
}
