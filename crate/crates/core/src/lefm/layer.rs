use std::sync::Arc;

use rand::Rng;

use super::{ExponentTable, LefmError};
use crate::{Scalar, Tensor};

/// Where a pixel's channels live inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelLayout {
    pub pixel_stride: usize,
    pub channel_stride: usize,
}

impl PixelLayout {
    /// Channel-last (`H x W x C`).
    pub fn interleaved(channels: usize) -> Self {
        Self {
            pixel_stride: channels,
            channel_stride: 1,
        }
    }

    /// Channel-first (`C x H x W`).
    pub fn planar(pixels: usize) -> Self {
        Self {
            pixel_stride: 1,
            channel_stride: pixels,
        }
    }

    #[inline]
    fn at(&self, pixel: usize, channel: usize) -> usize {
        pixel * self.pixel_stride + channel * self.channel_stride
    }
}

impl ExponentTable {
    /// Evaluates every monomial at `x` by raising the term-masked features to
    /// the power mask and taking the row product.
    pub fn psi<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>, LefmError> {
        if x.len() != self.inputs() {
            return Err(LefmError::ShapeMismatch {
                what: "feature vector length",
                expected: self.inputs(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LefmError::NonFinite("psi input"));
        }
        let mut out = vec![T::zero(); self.terms()];
        self.psi_into(x, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn psi_into<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let d = self.inputs();
        let tm = self.term_mask();
        let pm = self.power_mask();
        for (r, slot) in out.iter_mut().enumerate() {
            let mut acc = T::one();
            for i in 0..d {
                // unselected bases are 1, so 0^0 = 1 falls out naturally
                if tm[r * d + i] != 0 {
                    acc *= x[i].powi(pm[r * d + i] as i32);
                }
            }
            *slot = acc;
        }
    }

    /// `d psi_r / d x_i` at `x`.
    #[inline]
    fn psi_partial<T: Scalar>(&self, term: usize, feature: usize, x: &[T]) -> T {
        let q = self.exponent(term);
        if q[feature] == 0 {
            return T::zero();
        }
        let mut acc = T::from_f64_lossy(q[feature] as f64) * x[feature].powi(q[feature] as i32 - 1);
        for (j, (&qj, &xj)) in q.iter().zip(x).enumerate() {
            if j != feature && qj > 0 {
                acc *= xj.powi(qj as i32);
            }
        }
        acc
    }
}

/// `out = psi(x) ⊙ coeffs` at every pixel.
pub(crate) fn expand_into<T: Scalar>(
    table: &ExponentTable,
    coeffs: &[T],
    x: &[T],
    x_layout: PixelLayout,
    pixels: usize,
    out: &mut [T],
    out_layout: PixelLayout,
) {
    let d = table.inputs();
    let terms = table.terms();
    let mut xs = vec![T::zero(); d];
    let mut psi = vec![T::zero(); terms];
    for p in 0..pixels {
        for (i, v) in xs.iter_mut().enumerate() {
            *v = x[x_layout.at(p, i)];
        }
        table.psi_into(&xs, &mut psi);
        for r in 0..terms {
            out[out_layout.at(p, r)] = psi[r] * coeffs[r];
        }
    }
}

/// Accumulates coefficient gradients (in pixel order) and, optionally, input gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn expand_backward_into<T: Scalar>(
    table: &ExponentTable,
    coeffs: &[T],
    x: &[T],
    x_layout: PixelLayout,
    pixels: usize,
    upstream: &[T],
    up_layout: PixelLayout,
    grad_coeffs: &mut [T],
    mut grad_x: Option<&mut [T]>,
) {
    let d = table.inputs();
    let terms = table.terms();
    let mut xs = vec![T::zero(); d];
    let mut psi = vec![T::zero(); terms];
    for p in 0..pixels {
        for (i, v) in xs.iter_mut().enumerate() {
            *v = x[x_layout.at(p, i)];
        }
        table.psi_into(&xs, &mut psi);
        for r in 0..terms {
            grad_coeffs[r] += upstream[up_layout.at(p, r)] * psi[r];
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            for i in 0..d {
                let mut acc = T::zero();
                for r in 0..terms {
                    let up = upstream[up_layout.at(p, r)];
                    if up != T::zero() {
                        acc += up * coeffs[r] * table.psi_partial(r, i, &xs);
                    }
                }
                gx[x_layout.at(p, i)] += acc;
            }
        }
    }
}

/// Per-term normalization applied after the expansion (inference form).
#[derive(Debug, Clone, PartialEq)]
pub struct TermNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> TermNorm<T> {
    pub fn identity(terms: usize) -> Self {
        Self {
            gamma: vec![T::one(); terms],
            beta: vec![T::zero(); terms],
            running_mean: vec![T::zero(); terms],
            running_var: vec![T::one(); terms],
            eps: T::from_f64_lossy(1e-5),
        }
    }

    /// Affine form `y = scale * z + shift` of the normalization for term `r`.
    fn affine(&self, r: usize) -> (T, T) {
        let scale = self.gamma[r] / (self.running_var[r] + self.eps).sqrt();
        (scale, self.beta[r] - self.running_mean[r] * scale)
    }
}

/// Result of [`LefmLayer::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LefmGradients<T> {
    pub coefficients: Vec<T>,
    pub input: Tensor<T>,
}

/// Monomial expansion `d -> D` with a learnable coefficient per term.
#[derive(Debug, Clone, PartialEq)]
pub struct LefmLayer<T> {
    table: Arc<ExponentTable>,
    coefficients: Vec<T>,
    norm: Option<TermNorm<T>>,
}

impl<T: Scalar> LefmLayer<T> {
    /// Coefficients drawn uniformly from `[-1/sqrt(D), 1/sqrt(D)]`.
    pub fn new<R: Rng + ?Sized>(table: Arc<ExponentTable>, rng: &mut R) -> Self {
        let coefficients = init_coefficients(table.terms(), rng);
        Self {
            table,
            coefficients,
            norm: None,
        }
    }

    pub fn with_coefficients(table: Arc<ExponentTable>, coefficients: Vec<T>) -> Result<Self, LefmError> {
        if coefficients.len() != table.terms() {
            return Err(LefmError::ShapeMismatch {
                what: "coefficient count",
                expected: table.terms(),
                got: coefficients.len(),
            });
        }
        Ok(Self {
            table,
            coefficients,
            norm: None,
        })
    }

    pub fn with_norm(mut self, norm: TermNorm<T>) -> Result<Self, LefmError> {
        let terms = self.table.terms();
        for len in [norm.gamma.len(), norm.beta.len(), norm.running_mean.len(), norm.running_var.len()] {
            if len != terms {
                return Err(LefmError::ShapeMismatch {
                    what: "normalization statistics",
                    expected: terms,
                    got: len,
                });
            }
        }
        self.norm = Some(norm);
        Ok(self)
    }

    pub fn table(&self) -> &Arc<ExponentTable> {
        &self.table
    }

    pub fn coefficients(&self) -> &[T] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [T] {
        &mut self.coefficients
    }

    pub fn norm(&self) -> Option<&TermNorm<T>> {
        self.norm.as_ref()
    }

    /// Learnable parameter count: `D`, plus `2 D` when normalization is on.
    pub fn parameter_count(&self) -> usize {
        let terms = self.table.terms();
        terms + if self.norm.is_some() { 2 * terms } else { 0 }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize, LefmError> {
        let d = self.table.inputs();
        let channels = *x.shape().last().unwrap_or(&0);
        if channels != d {
            return Err(LefmError::ShapeMismatch {
                what: "input channel count",
                expected: d,
                got: channels,
            });
        }
        if !x.all_finite() {
            return Err(LefmError::NonFinite("lefm input"));
        }
        Ok(x.numel() / d)
    }

    /// Expands a channel-last tensor (`... x d`) into `... x D`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, LefmError> {
        let pixels = self.check_input(x)?;
        let terms = self.table.terms();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = terms;
        let mut out = Tensor::zeros(&shape);
        expand_into(
            &self.table,
            &self.coefficients,
            x.data(),
            PixelLayout::interleaved(self.table.inputs()),
            pixels,
            out.data_mut(),
            PixelLayout::interleaved(terms),
        );
        if let Some(norm) = &self.norm {
            for row in out.data_mut().chunks_exact_mut(terms) {
                for (r, v) in row.iter_mut().enumerate() {
                    let (scale, shift) = norm.affine(r);
                    *v = *v * scale + shift;
                }
            }
        }
        out.check_finite("lefm forward")
            .map_err(|_| LefmError::NonFinite("lefm output"))?;
        Ok(out)
    }

    /// Gradients of `sum(upstream ⊙ forward(x))` with respect to the
    /// coefficients and to `x`. Coefficient gradients are summed over all
    /// pixels in a fixed order.
    pub fn backward(&self, x: &Tensor<T>, upstream: &Tensor<T>) -> Result<LefmGradients<T>, LefmError> {
        let pixels = self.check_input(x)?;
        let terms = self.table.terms();
        if upstream.numel() != pixels * terms || upstream.shape().last() != Some(&terms) {
            return Err(LefmError::ShapeMismatch {
                what: "upstream gradient size",
                expected: pixels * terms,
                got: upstream.numel(),
            });
        }
        let scaled;
        let up = match &self.norm {
            None => upstream.data(),
            Some(norm) => {
                scaled = upstream
                    .data()
                    .chunks_exact(terms)
                    .flat_map(|row| row.iter().enumerate().map(|(r, &g)| g * norm.affine(r).0))
                    .collect::<Vec<_>>();
                &scaled
            }
        };
        let mut grad_coeffs = vec![T::zero(); terms];
        let mut grad_x = Tensor::zeros(x.shape());
        expand_backward_into(
            &self.table,
            &self.coefficients,
            x.data(),
            PixelLayout::interleaved(self.table.inputs()),
            pixels,
            up,
            PixelLayout::interleaved(terms),
            &mut grad_coeffs,
            Some(grad_x.data_mut()),
        );
        Ok(LefmGradients {
            coefficients: grad_coeffs,
            input: grad_x,
        })
    }
}

pub(crate) fn init_coefficients<T: Scalar, R: Rng + ?Sized>(terms: usize, rng: &mut R) -> Vec<T> {
    let bound = 1.0 / (terms as f64).sqrt();
    (0..terms)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect()
}
