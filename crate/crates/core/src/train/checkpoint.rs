use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Precision, TrainError};
use crate::lefm::ExponentTable;
use crate::nn::{AdamState, EarlyStopping, PlateauScheduler, SegmentationNet};
use crate::Scalar;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningRecord {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Every weight of a network plus its normalization buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub params: Vec<ParamRecord>,
    pub running: Option<RunningRecord>,
}

fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

impl NetSnapshot {
    pub fn capture<T: Scalar>(net: &SegmentationNet<T>) -> Self {
        let params = net
            .params()
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: widen(p.tensor.data()),
            })
            .collect();
        let running = net.expansion().and_then(|e| e.norm.as_ref()).map(|n| RunningRecord {
            mean: widen(&n.running_mean),
            var: widen(&n.running_var),
        });
        Self { params, running }
    }

    /// Writes the snapshot into `net`, matching parameters by name and shape.
    pub fn restore<T: Scalar>(&self, net: &mut SegmentationNet<T>) -> Result<(), TrainError> {
        if self.params.len() != net.params().len() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint has {} tensors, network has {}",
                self.params.len(),
                net.params().len()
            )));
        }
        for (rec, p) in self.params.iter().zip(net.params_mut().iter_mut()) {
            if rec.name != p.name || rec.shape != p.tensor.shape() || rec.values.len() != p.tensor.numel() {
                return Err(TrainError::Checkpoint(format!("tensor {} does not match the network", rec.name)));
            }
            for (d, &v) in p.tensor.data_mut().iter_mut().zip(&rec.values) {
                *d = T::from_f64_lossy(v);
            }
        }
        match (&self.running, net.running_stats_mut()) {
            (None, None) => Ok(()),
            (Some(r), Some((mean, var))) if r.mean.len() == mean.len() && r.var.len() == var.len() => {
                mean.iter_mut().zip(&r.mean).for_each(|(d, &v)| *d = T::from_f64_lossy(v));
                var.iter_mut().zip(&r.var).for_each(|(d, &v)| *d = T::from_f64_lossy(v));
                Ok(())
            }
            _ => Err(TrainError::Checkpoint("normalization buffers do not match the network".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamRecord {
    pub fn capture<T: Scalar>(s: &AdamState<T>) -> Self {
        Self {
            step: s.step,
            first_moment: s.first_moment.iter().map(|v| widen(v)).collect(),
            second_moment: s.second_moment.iter().map(|v| widen(v)).collect(),
        }
    }

    pub fn restore<T: Scalar>(&self) -> AdamState<T> {
        let narrow = |m: &Vec<Vec<f64>>| m.iter().map(|v| v.iter().map(|&x| T::from_f64_lossy(x)).collect()).collect();
        AdamState {
            step: self.step,
            first_moment: narrow(&self.first_moment),
            second_moment: narrow(&self.second_moment),
        }
    }
}

/// One validation epoch as recorded in the run history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Augmented image values clamped back into `[0, 1]`.
    pub clipped: usize,
}

/// Full training state: enough to resume a run bit-exactly, or to evaluate
/// the best weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub m: usize,
    pub input_channels: usize,
    pub batch_norm: bool,
    pub precision: Precision,
    pub patch_size: usize,
    pub table: Option<ExponentTable>,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub finished: bool,
    pub best_epoch: usize,
    pub weights: NetSnapshot,
    pub best_weights: NetSnapshot,
    pub adam: AdamRecord,
    pub scheduler: PlateauScheduler,
    pub early_stopping: EarlyStopping,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint format {}", c.format)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Network holding the best weights, in the requested precision.
    pub fn best_network<T: Scalar>(&self) -> Result<SegmentationNet<T>, TrainError> {
        use rand::SeedableRng;
        let config = crate::nn::NetConfig {
            input_channels: self.input_channels,
            order: self.m,
            batch_norm: self.batch_norm,
        };
        let mut net = SegmentationNet::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        self.best_weights.restore(&mut net)?;
        Ok(net)
    }

    /// Expansion coefficients of the best weights, if the run used an expansion.
    pub fn coefficients(&self) -> Option<&[f64]> {
        self.best_weights
            .params
            .iter()
            .find(|p| p.name == "lefm.coefficients")
            .map(|p| &p.values[..])
    }
}
