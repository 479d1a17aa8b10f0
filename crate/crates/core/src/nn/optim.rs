//! Adam with coupled L2 weight decay, reduce-on-plateau scheduling and early stopping.

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore};
use crate::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators mirroring the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One Adam update from the gradients stored in `params`.
    ///
    /// The decay term is added to the gradient (`g + weight_decay * theta`)
    /// before the moment updates; moments are bias corrected.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64, weight_decay: f64) -> Result<(), NnError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::Config(format!("learning rate must be positive, got {lr}")));
        }
        if self.first_moment.len() != params.len() {
            return Err(NnError::Config("optimizer state does not match parameters".into()));
        }
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(ADAM_BETA1);
        let b2 = T::from_f64_lossy(ADAM_BETA2);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::from_f64_lossy(lr);
        let wd = T::from_f64_lossy(weight_decay);
        let eps = T::from_f64_lossy(ADAM_EPS);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let (theta, grad) = p.tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..theta.len() {
                let g = grad[i] + wd * theta[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Halves the learning rate after `patience` epochs without a strict decrease
/// of the best validation loss, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation loss; returns the learning rate for the next epoch.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Stateless form of [`PlateauScheduler`]: the learning rate to use after the
/// last entry of `history`, given the rate `current_lr` in effect before it.
pub fn plateau_lr(history: &[f64], current_lr: f64, patience: usize, factor: f64, min_lr: f64) -> f64 {
    let Some(&last) = history.last() else {
        return current_lr;
    };
    let best_before = history[..history.len() - 1]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if last < best_before {
        return current_lr;
    }
    // epochs since the best-so-far was last strictly improved
    let mut best = f64::INFINITY;
    let mut since = 0;
    for &v in history {
        if v < best {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    if patience > 0 && since % patience == 0 {
        (current_lr * factor).max(min_lr)
    } else {
        current_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    /// The validation loss reached a new minimum.
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use proptest::prelude::*;

    fn scalar_store(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::from_vec(&[1], vec![theta]).unwrap());
        s
    }

    /// Reference scalar Adam, written out independently of the store machinery.
    fn reference_adam(theta0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> f64 {
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(theta);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
        }
        theta
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        st.step(&mut s, 1e-3, 0.0).unwrap();
        assert_eq!(s.get(crate::nn::ParamId(0)).data(), &[0.7]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = scalar_store(1.0);
        s.get_mut(crate::nn::ParamId(0)).accumulate_grad(&[1.0]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, 0.1, 0.0).unwrap();
        let theta = s.get(crate::nn::ParamId(0)).data()[0];
        assert!((theta - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta - 0.9).abs() < 1e-7);
    }

    #[test]
    fn quadratic_descent_matches_reference() {
        let id = crate::nn::ParamId(0);
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let mut losses = vec![0.5];
        for _ in 0..2 {
            s.zero_grads();
            let th = s.get(id).data()[0];
            s.get_mut(id).accumulate_grad(&[th]);
            st.step(&mut s, 0.1, 0.0).unwrap();
            let th = s.get(id).data()[0];
            losses.push(0.5 * th * th);
        }
        assert!(losses[1] < losses[0] && losses[2] < losses[1]);
        let expected = reference_adam(1.0, |t| t, 0.1, 2);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let id = crate::nn::ParamId(0);
        let mut s = scalar_store(2.0);
        s.get_mut(id).accumulate_grad(&[0.0]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, 0.01, 0.5).unwrap();
        assert!((st.first_moment[0][0] - 0.1).abs() < 1e-15);
        assert!(s.get(id).data()[0] < 2.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let id = crate::nn::ParamId(0);
        let mut s = scalar_store(1.0);
        s.get_mut(id).accumulate_grad(&[f64::NAN]);
        let mut st = AdamState::new(&s);
        assert!(matches!(st.step(&mut s, 0.1, 0.0), Err(NnError::NonFinite(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn plateau_halves_after_twenty_flat_epochs() {
        let mut sch = PlateauScheduler::new(20, 0.5, 1e-6);
        let mut lr = 1e-3;
        lr = sch.step(1.0, lr);
        for i in 0..19 {
            lr = sch.step(1.0, lr);
            assert_eq!(lr, 1e-3, "epoch {i}");
        }
        lr = sch.step(1.0, lr);
        assert_eq!(lr, 5e-4);
        let history = vec![1.0; 21];
        assert_eq!(plateau_lr(&history, 1e-3, 20, 0.5, 1e-6), 5e-4);
    }

    #[test]
    fn plateau_keeps_rate_while_improving_and_respects_floor() {
        let mut sch = PlateauScheduler::new(20, 0.5, 1e-6);
        let mut lr = 1e-3;
        for i in 0..100 {
            lr = sch.step(1.0 / (i + 1) as f64, lr);
        }
        assert_eq!(lr, 1e-3);
        let mut sch = PlateauScheduler::new(20, 0.5, 1e-6);
        let mut lr = 1e-6;
        for _ in 0..50 {
            lr = sch.step(1.0, lr);
        }
        assert_eq!(lr, 1e-6);
    }

    #[test]
    fn early_stopping_patience_one() {
        let mut es = EarlyStopping::new(1);
        assert_eq!(es.update(1, 0.2), StopDecision::Improved);
        assert_eq!(es.update(2, 0.3), StopDecision::Stop);
        assert_eq!(es.best_epoch, 1);
    }

    proptest! {
        #[test]
        fn stateless_and_stateful_schedules_agree(
            history in proptest::collection::vec(0u8..6, 1..120),
            patience in 1usize..8,
        ) {
            let history: Vec<f64> = history.into_iter().map(f64::from).collect();
            let mut sch = PlateauScheduler::new(patience, 0.5, 1e-6);
            let mut lr_stateful = 1e-3;
            let mut lr_stateless = 1e-3;
            for end in 1..=history.len() {
                lr_stateful = sch.step(history[end - 1], lr_stateful);
                lr_stateless = plateau_lr(&history[..end], lr_stateless, patience, 0.5, 1e-6);
                prop_assert_eq!(lr_stateful, lr_stateless);
                prop_assert!((1e-6..=1e-3).contains(&lr_stateful));
            }
        }
    }
}
