//! MiniUNet: a three-level encoder-decoder with skip connections, optionally
//! preceded by a learnable explicit feature map.

use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::{NnError, ParamId, ParamStore};
use crate::lefm::{term_count, ExponentTable, LefmLayer, TermNorm};
use crate::{Scalar, Tensor};

pub const ENCODER_WIDTHS: [usize; 3] = [16, 32, 64];
pub const BOTTLENECK_WIDTH: usize = 128;
const KERNEL: usize = 3;
const NORM_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (gain / fan_in as f64).sqrt();
        let w: Vec<T> = (0..out_ch * fan_in)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], w).expect("conv weight shape"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NnError> {
        g.conv2d(x, self.weight, self.bias)
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    first: ConvLayer,
    second: ConvLayer,
}

impl ConvBlock {
    fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        // He-uniform: bound sqrt(6 / fan_in)
        Self {
            first: ConvLayer::build(store, &format!("{name}.conv_a"), in_ch, out_ch, KERNEL, 6.0, rng),
            second: ConvLayer::build(store, &format!("{name}.conv_b"), out_ch, out_ch, KERNEL, 6.0, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NnError> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.second.forward(g, h)?;
        g.relu(h)
    }
}

/// Encoder-decoder body: `C -> 1` channel probability map at input resolution.
#[derive(Debug, Clone)]
pub struct MiniUNet {
    in_channels: usize,
    encoder: [ConvBlock; 3],
    bottleneck: ConvBlock,
    decoder: [ConvBlock; 3],
    head: ConvLayer,
}

impl MiniUNet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, in_channels: usize, rng: &mut R) -> Self {
        let [w1, w2, w3] = ENCODER_WIDTHS;
        let encoder = [
            ConvBlock::build(store, "enc1", in_channels, w1, rng),
            ConvBlock::build(store, "enc2", w1, w2, rng),
            ConvBlock::build(store, "enc3", w2, w3, rng),
        ];
        let bottleneck = ConvBlock::build(store, "bottleneck", w3, BOTTLENECK_WIDTH, rng);
        let decoder = [
            ConvBlock::build(store, "dec3", BOTTLENECK_WIDTH + w3, w3, rng),
            ConvBlock::build(store, "dec2", w3 + w2, w2, rng),
            ConvBlock::build(store, "dec1", w2 + w1, w1, rng),
        ];
        let head = ConvLayer::build(store, "head", w1, 1, 1, 3.0, rng);
        Self {
            in_channels,
            encoder,
            bottleneck,
            decoder,
            head,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Returns the per-pixel probability map (`B x 1 x H x W`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NnError> {
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(g, h)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        h = self.bottleneck.forward(g, h)?;
        for block in &self.decoder {
            let up = g.upsample2(h)?;
            let skip = skips.pop().expect("one skip per level");
            let merged = g.concat(up, skip)?;
            h = block.forward(g, merged)?;
        }
        let logits = self.head.forward(g, h)?;
        g.sigmoid(logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionNorm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion<T> {
    pub table: Arc<ExponentTable>,
    pub coefficients: ParamId,
    pub norm: Option<ExpansionNorm<T>>,
}

/// Architecture knobs of a [`SegmentationNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Raw input channels `d`.
    pub input_channels: usize,
    /// Expansion order `m`; 0 feeds the raw channels straight into the MiniUNet.
    pub order: usize,
    /// Normalize the expanded terms (only meaningful when `order > 0`).
    pub batch_norm: bool,
}

/// Output handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub probabilities: Var,
    /// The training-mode normalization node, whose batch statistics feed the running averages.
    pub norm_node: Option<Var>,
}

/// Optional LEFM layer followed by a [`MiniUNet`], with all weights in one store.
#[derive(Debug, Clone)]
pub struct SegmentationNet<T> {
    config: NetConfig,
    store: ParamStore<T>,
    expansion: Option<Expansion<T>>,
    unet: MiniUNet,
}

impl<T: Scalar> SegmentationNet<T> {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self, NnError> {
        let mut store = ParamStore::new();
        let expansion = if config.order > 0 {
            let table = Arc::new(ExponentTable::enumerate(config.input_channels, config.order)?);
            let terms = table.terms();
            let layer = LefmLayer::<T>::new(table.clone(), rng);
            let coefficients = store.add(
                "lefm.coefficients",
                Tensor::from_vec(&[terms], layer.coefficients().to_vec()).expect("coefficient shape"),
            );
            let norm = config.batch_norm.then(|| ExpansionNorm {
                gamma: store.add("lefm.norm.gamma", Tensor::full(&[terms], T::one())),
                beta: store.add("lefm.norm.beta", Tensor::zeros(&[terms])),
                running_mean: vec![T::zero(); terms],
                running_var: vec![T::one(); terms],
            });
            Some(Expansion {
                table,
                coefficients,
                norm,
            })
        } else {
            if config.input_channels == 0 {
                return Err(NnError::Config("input channel count must be positive".into()));
            }
            None
        };
        let unet_in = expansion.as_ref().map_or(config.input_channels, |e| e.table.terms());
        let unet = MiniUNet::build(&mut store, unet_in, rng);
        Ok(Self {
            config,
            store,
            expansion,
            unet,
        })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn expansion(&self) -> Option<&Expansion<T>> {
        self.expansion.as_ref()
    }

    pub fn unet(&self) -> &MiniUNet {
        &self.unet
    }

    /// Total trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Records the forward pass for `x` (`B x d x H x W`) on `g`.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, T>, x: Var, mode: Mode) -> Result<NetOutput, NnError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(NnError::Shape {
                what: "network input (B x d x H x W)",
                expected: vec![0, self.config.input_channels, 0, 0],
                got: shape,
            });
        }
        if !shape[2].is_multiple_of(8) || !shape[3].is_multiple_of(8) {
            return Err(NnError::Shape {
                what: "spatial size must be a multiple of 8",
                expected: vec![shape[2].next_multiple_of(8), shape[3].next_multiple_of(8)],
                got: vec![shape[2], shape[3]],
            });
        }
        let mut h = x;
        let mut norm_node = None;
        if let Some(exp) = &self.expansion {
            h = g.lefm(h, exp.coefficients, exp.table.clone())?;
            if let Some(norm) = &exp.norm {
                let running = (mode == Mode::Eval).then(|| (&norm.running_mean[..], &norm.running_var[..]));
                h = g.batch_norm(h, norm.gamma, norm.beta, running, T::from_f64_lossy(NORM_EPS))?;
                if mode == Mode::Train {
                    norm_node = Some(h);
                }
            }
        }
        let probabilities = self.unet.forward(g, h)?;
        Ok(NetOutput {
            probabilities,
            norm_node,
        })
    }

    /// Folds batch statistics into the running averages used in eval mode.
    pub fn update_running_stats(&mut self, mean: &[T], var: &[T]) {
        if let Some(norm) = self.expansion.as_mut().and_then(|e| e.norm.as_mut()) {
            let mom = T::from_f64_lossy(NORM_MOMENTUM);
            for (r, &m) in norm.running_mean.iter_mut().zip(mean) {
                *r = (T::one() - mom) * *r + mom * m;
            }
            for (r, &v) in norm.running_var.iter_mut().zip(var) {
                *r = (T::one() - mom) * *r + mom * v;
            }
        }
    }

    /// Mutable running statistics, for checkpoint restore.
    pub fn running_stats_mut(&mut self) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        self.expansion
            .as_mut()
            .and_then(|e| e.norm.as_mut())
            .map(|n| (&mut n.running_mean, &mut n.running_var))
    }

    /// Inference on a `B x d x H x W` batch.
    pub fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = Graph::new(&self.store);
        let input = g.input(x)?;
        let out = self.forward(&mut g, input, Mode::Eval)?;
        Ok(g.value(out.probabilities).clone())
    }

    /// Snapshot of the expansion as a standalone layer (eval-mode normalization).
    pub fn lefm_layer(&self) -> Option<LefmLayer<T>> {
        let exp = self.expansion.as_ref()?;
        let layer = LefmLayer::with_coefficients(
            exp.table.clone(),
            self.store.get(exp.coefficients).data().to_vec(),
        )
        .expect("coefficient count matches table");
        Some(match &exp.norm {
            None => layer,
            Some(n) => layer
                .with_norm(TermNorm {
                    gamma: self.store.get(n.gamma).data().to_vec(),
                    beta: self.store.get(n.beta).data().to_vec(),
                    running_mean: n.running_mean.clone(),
                    running_var: n.running_var.clone(),
                    eps: T::from_f64_lossy(NORM_EPS),
                })
                .expect("norm statistics match table"),
        })
    }
}

/// Closed-form weight increase from prepending an order-`order` expansion to
/// a MiniUNet over `inputs` channels: `D` coefficients, `(D - d) * 16 * 9`
/// extra first-convolution weights, and `2 D` normalization terms if enabled.
pub fn expansion_parameter_increase(inputs: usize, order: usize, batch_norm: bool) -> Option<usize> {
    if order == 0 {
        return Some(0);
    }
    let terms = term_count(inputs, order)? as usize;
    let fan_in = (terms - inputs) * ENCODER_WIDTHS[0] * KERNEL * KERNEL;
    Some(terms + fan_in + if batch_norm { 2 * terms } else { 0 })
}
