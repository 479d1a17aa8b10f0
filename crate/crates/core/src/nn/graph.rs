//! Tape-based reverse-mode differentiation over `B x C x H x W` tensors.
//!
//! Operations are recorded in execution order on a [`Graph`]; parameters
//! are referenced by [`ParamId`] and read from the borrowed [`ParamStore`].
//! [`Graph::backward`] walks the tape in reverse and returns one gradient
//! buffer per parameter.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::conv::{conv_backward, conv_forward, ConvGeometry};
use super::{NnError, ParamId, ParamStore};
use crate::lefm::{expand_backward_into, expand_into, ExponentTable, PixelLayout};
use crate::{Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient per parameter, indexed like the [`ParamStore`]; `None` when unused.
pub type ParamGrads<T> = Vec<Option<Vec<T>>>;

enum Op<T> {
    Input,
    Lefm {
        input: Var,
        coeffs: ParamId,
        table: Arc<ExponentTable>,
    },
    Norm {
        input: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch mean and unbiased variance, present in training mode.
        batch_stats: Option<(Vec<T>, Vec<T>)>,
    },
    Conv {
        input: Var,
        weight: ParamId,
        bias: ParamId,
        geometry: ConvGeometry,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Concat(Var, Var),
    Sigmoid(Var),
    Dice {
        pred: Var,
        target: Vec<T>,
        intersection: T,
        denominator: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn dims4(t: &Tensor<impl Scalar>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant `B x C x H x W` input.
    pub fn input(&mut self, x: Tensor<T>) -> Result<Var, NnError> {
        if x.shape().len() != 4 {
            return Err(NnError::Shape {
                what: "network input rank",
                expected: vec![4],
                got: vec![x.shape().len()],
            });
        }
        self.push(x, Op::Input, false, "input")
    }

    /// Pixelwise monomial expansion `psi(x) ⊙ a` of every image in the batch.
    pub fn lefm(&mut self, x: Var, coeffs: ParamId, table: Arc<ExponentTable>) -> Result<Var, NnError> {
        let (b, c, h, w) = dims4(self.value(x));
        if c != table.inputs() {
            return Err(NnError::Shape {
                what: "expansion input channels",
                expected: vec![table.inputs()],
                got: vec![c],
            });
        }
        let terms = table.terms();
        let hw = h * w;
        let a = self.params.get(coeffs).data();
        let mut out = Tensor::zeros(&[b, terms, h, w]);
        {
            let input = self.value(x).data();
            let dst = out.data_mut();
            for i in 0..b {
                expand_into(
                    &table,
                    a,
                    &input[i * c * hw..(i + 1) * c * hw],
                    PixelLayout::planar(hw),
                    hw,
                    &mut dst[i * terms * hw..(i + 1) * terms * hw],
                    PixelLayout::planar(hw),
                );
            }
        }
        self.push(out, Op::Lefm { input: x, coeffs, table }, true, "lefm")
    }

    /// Per-channel normalization with learnable scale and shift.
    ///
    /// With `running = None` the batch statistics are used (training mode);
    /// otherwise the supplied running mean and variance are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<Var, NnError> {
        let (b, c, h, w) = dims4(self.value(x));
        let hw = h * w;
        let n = b * hw;
        let input = self.value(x).data();
        let g = self.params.get(gamma).data();
        let be = self.params.get(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = match running {
            Some((rm, rv)) => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                None
            }
            None => {
                let nt = T::from_usize_lossy(n);
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..b {
                        s += input[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = s / nt;
                    let mut sq = T::zero();
                    for i in 0..b {
                        for &v in &input[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / nt;
                }
                let correction = if n > 1 { nt / T::from_usize_lossy(n - 1) } else { T::one() };
                Some((mean.clone(), var.iter().map(|&v| v * correction).collect()))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); input.len()];
        let mut out = Tensor::zeros(self.value(x).shape());
        {
            let dst = out.data_mut();
            for i in 0..b {
                for ch in 0..c {
                    let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for k in range {
                        let xh = (input[k] - mean[ch]) * inv_std[ch];
                        xhat[k] = xh;
                        dst[k] = g[ch] * xh + be[ch];
                    }
                }
            }
        }
        self.push(
            out,
            Op::Norm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            true,
            "batch_norm",
        )
    }

    /// Batch mean and unbiased variance recorded by a training-mode norm node.
    pub fn batch_statistics(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::Norm {
                batch_stats: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    /// Same-padded convolution; the kernel size comes from the weight shape `M x C x k x k`.
    pub fn conv2d(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var, NnError> {
        let (b, c, h, w) = dims4(self.value(x));
        let ws = self.params.get(weight).shape();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(NnError::Shape {
                what: "convolution weight",
                expected: vec![ws.first().copied().unwrap_or(0), c, 3, 3],
                got: ws.to_vec(),
            });
        }
        let geometry = ConvGeometry {
            in_channels: c,
            out_channels: ws[0],
            height: h,
            width: w,
            kernel: ws[2],
        };
        let mut out = Tensor::zeros(&[b, ws[0], h, w]);
        conv_forward(
            &geometry,
            b,
            self.value(x).data(),
            self.params.get(weight).data(),
            self.params.get(bias).data(),
            out.data_mut(),
        );
        self.push(
            out,
            Op::Conv {
                input: x,
                weight,
                bias,
                geometry,
            },
            true,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs, "relu")
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first position in scan order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let (b, c, h, w) = dims4(self.value(x));
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape {
                what: "max-pool input extent (must be even)",
                expected: vec![h + h % 2, w + w % 2],
                got: vec![h, w],
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let input = self.value(x).data();
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0u32; b * c * oh * ow];
        {
            let dst = out.data_mut();
            for plane in 0..b * c {
                let src = &input[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = 2 * y * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let k = (2 * y + dy) * w + 2 * xx + dx;
                            if src[k] > src[best] {
                                best = k;
                            }
                        }
                        let o = plane * oh * ow + y * ow + xx;
                        dst[o] = src[best];
                        argmax[o] = best as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::MaxPool { input: x, argmax }, needs, "max_pool2")
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, NnError> {
        let (b, c, h, w) = dims4(self.value(x));
        let (oh, ow) = (2 * h, 2 * w);
        let input = self.value(x).data();
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        {
            let dst = out.data_mut();
            for plane in 0..b * c {
                let src = &input[plane * h * w..(plane + 1) * h * w];
                let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        d[y * ow + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample(x), needs, "upsample2")
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (n, ca, h, w) = dims4(self.value(a));
        let (nb, cb, hb, wb) = dims4(self.value(b));
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::Shape {
                what: "concat operands",
                expected: vec![n, h, w],
                got: vec![nb, hb, wb],
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let dst = out.data_mut();
            for i in 0..n {
                let base = i * (ca + cb) * hw;
                dst[base..base + ca * hw].copy_from_slice(&va[i * ca * hw..(i + 1) * ca * hw]);
                dst[base + ca * hw..base + (ca + cb) * hw].copy_from_slice(&vb[i * cb * hw..(i + 1) * cb * hw]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), needs, "concat")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = sigmoid(*v);
        }
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs, "sigmoid")
    }

    /// Soft Dice loss `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` pooled over the batch.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, NnError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(NnError::Shape {
                what: "dice target",
                expected: p.shape().to_vec(),
                got: target.shape().to_vec(),
            });
        }
        let (intersection, denominator) = dice_sums(p.data(), target.data());
        let smooth = T::from_f64_lossy(DICE_SMOOTH);
        let loss = T::one() - (T::from_f64_lossy(2.0) * intersection + smooth) / denominator;
        let needs = self.needs(pred);
        self.push(
            Tensor::from_vec(&[1], vec![loss]).expect("scalar"),
            Op::Dice {
                pred,
                target: target.data().to_vec(),
                intersection,
                denominator,
            },
            needs,
            "dice_loss",
        )
    }

    /// Hash of every ReLU sign pattern and max-pool selection on the tape.
    ///
    /// Two evaluations with equal signatures lie in the same smooth piece of
    /// the network, which is what finite-difference checks require.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>, NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::Shape {
                what: "backward needs a scalar loss",
                expected: vec![1],
                got: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: ParamGrads<T> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let xv = self.value(*x).data();
                        let d = g
                            .iter()
                            .zip(xv)
                            .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                            .collect();
                        add_into(&mut grads, *x, d);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(*x) {
                        let y = node.value.data();
                        let d = g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                        add_into(&mut grads, *x, d);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if self.needs(*input) {
                        let (b, c, h, w) = dims4(self.value(*input));
                        let ohw = (h / 2) * (w / 2);
                        let mut d = vec![T::zero(); b * c * h * w];
                        for plane in 0..b * c {
                            for o in 0..ohw {
                                let k = plane * ohw + o;
                                d[plane * h * w + argmax[k] as usize] += g[k];
                            }
                        }
                        add_into(&mut grads, *input, d);
                    }
                }
                Op::Upsample(x) => {
                    if self.needs(*x) {
                        let (b, c, h, w) = dims4(self.value(*x));
                        let (oh, ow) = (2 * h, 2 * w);
                        let mut d = vec![T::zero(); b * c * h * w];
                        for plane in 0..b * c {
                            let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                            let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                            for y in 0..oh {
                                for xx in 0..ow {
                                    dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                                }
                            }
                        }
                        add_into(&mut grads, *x, d);
                    }
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = dims4(self.value(*a));
                    let cb = self.value(*b).shape()[1];
                    let hw = h * w;
                    if self.needs(*a) {
                        let mut d = Vec::with_capacity(n * ca * hw);
                        for i in 0..n {
                            let base = i * (ca + cb) * hw;
                            d.extend_from_slice(&g[base..base + ca * hw]);
                        }
                        add_into(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let mut d = Vec::with_capacity(n * cb * hw);
                        for i in 0..n {
                            let base = i * (ca + cb) * hw + ca * hw;
                            d.extend_from_slice(&g[base..base + cb * hw]);
                        }
                        add_into(&mut grads, *b, d);
                    }
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geometry,
                } => {
                    let batch = self.value(*input).shape()[0];
                    let mut gw = vec![T::zero(); self.params.get(*weight).numel()];
                    let mut gb = vec![T::zero(); geometry.out_channels];
                    let mut gi = self.needs(*input).then(|| vec![T::zero(); self.value(*input).numel()]);
                    conv_backward(
                        geometry,
                        batch,
                        self.value(*input).data(),
                        self.params.get(*weight).data(),
                        &g,
                        &mut gw,
                        &mut gb,
                        gi.as_deref_mut(),
                    );
                    add_param(&mut param_grads, *weight, gw);
                    add_param(&mut param_grads, *bias, gb);
                    if let Some(gi) = gi {
                        add_into(&mut grads, *input, gi);
                    }
                }
                Op::Lefm { input, coeffs, table } => {
                    let (b, c, h, w) = dims4(self.value(*input));
                    let hw = h * w;
                    let terms = table.terms();
                    let a = self.params.get(*coeffs).data();
                    let xv = self.value(*input).data();
                    let mut ga = vec![T::zero(); terms];
                    let mut gx = self.needs(*input).then(|| vec![T::zero(); xv.len()]);
                    for i in 0..b {
                        expand_backward_into(
                            table,
                            a,
                            &xv[i * c * hw..(i + 1) * c * hw],
                            PixelLayout::planar(hw),
                            hw,
                            &g[i * terms * hw..(i + 1) * terms * hw],
                            PixelLayout::planar(hw),
                            &mut ga,
                            gx.as_mut().map(|v| &mut v[i * c * hw..(i + 1) * c * hw]),
                        );
                    }
                    add_param(&mut param_grads, *coeffs, ga);
                    if let Some(gx) = gx {
                        add_into(&mut grads, *input, gx);
                    }
                }
                Op::Norm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (b, c, h, w) = dims4(self.value(*input));
                    let hw = h * w;
                    let gam = self.params.get(*gamma).data();
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for i in 0..b {
                        for ch in 0..c {
                            for k in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                                sum_dy[ch] += g[k];
                                sum_dy_xhat[ch] += g[k] * xhat[k];
                            }
                        }
                    }
                    if self.needs(*input) {
                        let mut d = vec![T::zero(); g.len()];
                        let n = T::from_usize_lossy(b * hw);
                        for i in 0..b {
                            for ch in 0..c {
                                let scale = gam[ch] * inv_std[ch];
                                for k in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                                    d[k] = if batch_stats.is_some() {
                                        scale / n * (n * g[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                                    } else {
                                        scale * g[k]
                                    };
                                }
                            }
                        }
                        add_into(&mut grads, *input, d);
                    }
                    add_param(&mut param_grads, *gamma, sum_dy_xhat);
                    add_param(&mut param_grads, *beta, sum_dy);
                }
                Op::Dice {
                    pred,
                    target,
                    intersection,
                    denominator,
                } => {
                    if self.needs(*pred) {
                        let two = T::from_f64_lossy(2.0);
                        let numer = two * *intersection + T::from_f64_lossy(DICE_SMOOTH);
                        let den2 = *denominator * *denominator;
                        let d = target
                            .iter()
                            .map(|&t| -g[0] * (two * t * *denominator - numer) / den2)
                            .collect();
                        add_into(&mut grads, *pred, d);
                    }
                }
            }
        }
        for (g, p) in param_grads.iter().zip(self.params.iter()) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        Ok(param_grads)
    }
}

/// `(sum(p t), sum(p) + sum(t) + smooth)`.
pub(crate) fn dice_sums<T: Scalar>(pred: &[T], target: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut total = T::zero();
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    (inter, total + T::from_f64_lossy(DICE_SMOOTH))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn add_param<T: Scalar>(grads: &mut ParamGrads<T>, id: ParamId, delta: Vec<T>) {
    match &mut grads[id.index()] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
