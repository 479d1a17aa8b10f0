//! Central-difference gradient checks shared by the gradient and acceptance suites.

use std::sync::Arc;

use lefm::lefm::{ExponentTable, LefmLayer};
use lefm::nn::{Graph, Mode, NetConfig, SegmentationNet};
use lefm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const LAYER_CASES: [(usize, usize); 5] = [(1, 2), (2, 3), (3, 2), (3, 3), (4, 2)];

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Worst relative error of the layer's analytic gradients (coefficients and inputs).
pub fn check_layer(d: usize, m: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = Arc::new(ExponentTable::enumerate(d, m).unwrap());
    let terms = table.terms();
    let pixels = 5;
    let coeffs = uniform(&mut rng, terms, -1.0, 1.0);
    let layer = LefmLayer::with_coefficients(table.clone(), coeffs).unwrap();
    let x = Tensor::from_vec(&[pixels, d], uniform(&mut rng, pixels * d, 0.1, 1.0)).unwrap();
    let up = Tensor::from_vec(&[pixels, terms], uniform(&mut rng, pixels * terms, -1.0, 1.0)).unwrap();
    let objective = |layer: &LefmLayer<f64>, x: &Tensor<f64>| -> f64 {
        let y = layer.forward(x).unwrap();
        y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    let grads = layer.backward(&x, &up).unwrap();

    let mut worst = 0.0f64;
    for r in 0..terms {
        let mut plus = layer.clone();
        plus.coefficients_mut()[r] += STEP;
        let mut minus = layer.clone();
        minus.coefficients_mut()[r] -= STEP;
        let numeric = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * STEP);
        let e = rel_err(grads.coefficients[r], numeric);
        if e > LAYER_TOLERANCE {
            return Err(format!("d={d} m={m} coefficient {r}: rel err {e}"));
        }
        worst = worst.max(e);
    }
    for i in 0..pixels * d {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let numeric = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * STEP);
        let e = rel_err(grads.input.data()[i], numeric);
        if e > LAYER_TOLERANCE {
            return Err(format!("d={d} m={m} input {i}: rel err {e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn loss_and_kinks(net: &SegmentationNet<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> (f64, u64) {
    let mut g = Graph::new(net.params());
    let input = g.input(x.clone()).unwrap();
    let out = net.forward(&mut g, input, Mode::Train).unwrap();
    let loss = g.dice_loss(out.probabilities, y).unwrap();
    (g.value(loss).data()[0], g.kink_signature())
}

/// Worst relative error over up to 50 sampled entries of every parameter tensor.
pub fn check_network(order: usize, batch_norm: bool, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetConfig {
        input_channels: 3,
        order,
        batch_norm,
    };
    let mut net = SegmentationNet::<f64>::new(config, &mut rng).unwrap();
    // move biases and norm parameters off their zero/one initial values
    for p in net.params_mut().iter_mut() {
        if !p.name.ends_with(".weight") && p.name != "lefm.coefficients" {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    let batch = 2;
    let x = Tensor::from_vec(&[batch, 3, 8, 8], uniform(&mut rng, batch * 3 * 64, 0.1, 1.0)).unwrap();
    let y = Tensor::from_vec(&[batch, 1, 8, 8], (0..batch * 64).map(|_| f64::from(rng.random_range(0..2u8))).collect()).unwrap();

    let grads = {
        let mut g = Graph::new(net.params());
        let input = g.input(x.clone()).unwrap();
        let out = net.forward(&mut g, input, Mode::Train).unwrap();
        let loss = g.dice_loss(out.probabilities, &y).unwrap();
        g.backward(loss).unwrap()
    };
    let (_, base_kinks) = loss_and_kinks(&net, &x, &y);

    let mut worst = 0.0f64;
    for (k, grad) in grads.iter().enumerate() {
        let (name, numel) = {
            let p = net.params().iter().nth(k).unwrap();
            (p.name.clone(), p.tensor.numel())
        };
        let analytic = grad.as_ref().ok_or_else(|| format!("{name} has no gradient"))?;
        let mut picks: Vec<usize> = if numel <= 50 {
            (0..numel).collect()
        } else {
            (0..120).map(|_| rng.random_range(0..numel)).collect()
        };
        picks.sort_unstable();
        picks.dedup();
        let mut checked = 0;
        for i in picks {
            if checked == numel.min(50) {
                break;
            }
            let perturb = |net: &mut SegmentationNet<f64>, delta: f64| {
                net.params_mut().iter_mut().nth(k).unwrap().tensor.data_mut()[i] += delta;
            };
            // shrink the step until neither side crosses a ReLU or pooling kink
            let mut numeric = None;
            for step in [STEP, STEP / 10.0, STEP / 100.0] {
                perturb(&mut net, step);
                let (lp, kp) = loss_and_kinks(&net, &x, &y);
                perturb(&mut net, -2.0 * step);
                let (lm, km) = loss_and_kinks(&net, &x, &y);
                perturb(&mut net, step);
                if kp == base_kinks && km == base_kinks {
                    numeric = Some((lp - lm) / (2.0 * step));
                    break;
                }
            }
            let Some(numeric) = numeric else { continue };
            let e = rel_err(analytic[i], numeric);
            if e > NETWORK_TOLERANCE {
                return Err(format!(
                    "m={order} bn={batch_norm} {name}[{i}]: analytic {} numeric {numeric} rel err {e}",
                    analytic[i]
                ));
            }
            worst = worst.max(e);
            checked += 1;
        }
        if checked != numel.min(50) {
            return Err(format!("{name}: too few samples away from kinks"));
        }
    }
    Ok(worst)
}
