use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{AdamRecord, Checkpoint, EpochRecord, NetSnapshot, CHECKPOINT_FORMAT};
use super::{model_name, TrainConfig, TrainError};
use crate::data::{augment, make_patches, stitch, validation_indices, AnnotatedSample, Patch};
use crate::metrics::{confusion, ConfusionCounts, RunReport};
use crate::nn::{AdamState, EarlyStopping, Graph, Mode, NetConfig, PlateauScheduler, SegmentationNet, StopDecision};
use crate::{Scalar, Tensor};

const INPUT_CHANNELS: usize = 3;

/// Independent random stream for one `(seed, epoch, index)` triple.
pub fn stream_rng(seed: u64, epoch: usize, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_STREAM: u64 = u64::MAX - 1;
const VALIDATION_SALT: u64 = 0x5EED_0000_0000_0001;

/// Packs channel-last patches into `B x 3 x S x S` inputs and `B x 1 x S x S` targets.
pub fn batch_tensors<T: Scalar>(patches: &[&Patch]) -> (Tensor<T>, Tensor<T>) {
    let b = patches.len();
    let s = patches.first().map_or(0, |p| p.size);
    let plane = s * s;
    let mut x = vec![T::zero(); b * INPUT_CHANNELS * plane];
    let mut y = vec![T::zero(); b * plane];
    for (i, p) in patches.iter().enumerate() {
        for t in 0..plane {
            for c in 0..INPUT_CHANNELS {
                x[(i * INPUT_CHANNELS + c) * plane + t] = T::from_f64_lossy(f64::from(p.image[t * INPUT_CHANNELS + c]));
            }
            y[i * plane + t] = T::from_f64_lossy(f64::from(p.label[t]));
        }
    }
    (
        Tensor::from_vec(&[b, INPUT_CHANNELS, s, s], x).expect("batch shape"),
        Tensor::from_vec(&[b, 1, s, s], y).expect("target shape"),
    )
}

/// Optional interventions in the training loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Replaces the measured validation loss: `(epoch, measured) -> used`.
    pub validation: Option<&'a dyn Fn(usize, f64) -> f64>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

/// One seeded training run in progress.
pub struct Trainer<'d, T: Scalar> {
    config: TrainConfig,
    config_hash: String,
    m: usize,
    seed: u64,
    pool: Vec<Patch>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    test: &'d [AnnotatedSample],
    net: SegmentationNet<T>,
    adam: AdamState<T>,
    scheduler: PlateauScheduler,
    early: EarlyStopping,
    lr: f64,
    epoch: usize,
    finished: bool,
    best: NetSnapshot,
    history: Vec<EpochRecord>,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(
        config: &TrainConfig,
        m: usize,
        seed: u64,
        train: &[AnnotatedSample],
        test: &'d [AnnotatedSample],
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let mut pool = Vec::new();
        for s in train {
            pool.extend(make_patches(s, config.patch_size, config.patch_stride)?);
        }
        if pool.len() < 2 {
            return Err(TrainError::Config("need at least two training patches".into()));
        }
        if test.is_empty() {
            return Err(TrainError::Config("test set is empty".into()));
        }
        let val_idx = validation_indices(pool.len(), config.val_fraction.max(f64::MIN_POSITIVE), seed ^ VALIDATION_SALT);
        let train_idx: Vec<usize> = (0..pool.len()).filter(|i| val_idx.binary_search(i).is_err()).collect();
        let net_config = NetConfig {
            input_channels: INPUT_CHANNELS,
            order: m,
            batch_norm: config.batch_norm,
        };
        let net = SegmentationNet::<T>::new(net_config, &mut stream_rng(seed, 0, INIT_STREAM))?;
        let adam = AdamState::new(net.params());
        let best = NetSnapshot::capture(&net);
        Ok(Self {
            config_hash: config.hash(),
            config: config.clone(),
            m,
            seed,
            pool,
            train_idx,
            val_idx,
            test,
            net,
            adam,
            scheduler: PlateauScheduler::new(config.plateau_patience, config.lr_factor, config.lr_min),
            early: EarlyStopping::new(config.early_stop_patience),
            lr: config.lr0,
            epoch: 0,
            finished: false,
            best,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        config: &TrainConfig,
        train: &[AnnotatedSample],
        test: &'d [AnnotatedSample],
        ck: &Checkpoint,
    ) -> Result<Self, TrainError> {
        if ck.config_hash != config.hash() {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint config hash {} does not match {}",
                ck.config_hash,
                config.hash()
            )));
        }
        let mut t = Self::new(config, ck.m, ck.seed, train, test)?;
        ck.weights.restore(&mut t.net)?;
        t.adam = ck.adam.restore();
        if t.adam.first_moment.len() != t.net.params().len() {
            return Err(TrainError::Checkpoint("optimizer state does not match the network".into()));
        }
        t.scheduler = ck.scheduler.clone();
        t.early = ck.early_stopping.clone();
        t.lr = ck.lr;
        t.epoch = ck.epoch;
        t.finished = ck.finished;
        t.best = ck.best_weights.clone();
        t.history = ck.history.clone();
        Ok(t)
    }

    pub fn network(&self) -> &SegmentationNet<T> {
        &self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn validation_patches(&self) -> usize {
        self.val_idx.len()
    }

    pub fn training_patches(&self) -> usize {
        self.train_idx.len()
    }

    fn train_epoch(&mut self) -> Result<(f64, usize), TrainError> {
        let epoch = self.epoch + 1;
        let mut order = self.train_idx.clone();
        order.shuffle(&mut stream_rng(self.seed, epoch, SHUFFLE_STREAM));
        let mut aug_cfg = self.config.augmentation.clone();
        aug_cfg.seed = self.seed;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut clipped = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let augmented: Vec<Patch> = chunk
                .iter()
                .map(|&i| {
                    let (p, o) = augment(&self.pool[i], &aug_cfg, &mut stream_rng(self.seed, epoch, i as u64));
                    clipped += o.clipped;
                    p
                })
                .collect();
            let refs: Vec<&Patch> = augmented.iter().collect();
            let (x, y) = batch_tensors::<T>(&refs);
            let (loss, grads, stats) = {
                let mut g = Graph::new(self.net.params());
                let input = g.input(x)?;
                let out = self.net.forward(&mut g, input, Mode::Train)?;
                let loss = g.dice_loss(out.probabilities, &y)?;
                let value = g.value(loss).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        message: format!("training loss is {value}"),
                    });
                }
                let grads = g.backward(loss)?;
                let stats = out
                    .norm_node
                    .and_then(|n| g.batch_statistics(n))
                    .map(|(m, v)| (m.to_vec(), v.to_vec()));
                (value, grads, stats)
            };
            let params = self.net.params_mut();
            params.zero_grads();
            params.accumulate(&grads);
            self.adam.step(params, self.lr, self.config.weight_decay).map_err(|e| TrainError::Diverged {
                epoch,
                message: e.to_string(),
            })?;
            if let Some((mean, var)) = stats {
                self.net.update_running_stats(&mean, &var);
            }
            loss_sum += loss;
            batches += 1;
        }
        Ok((loss_sum / batches.max(1) as f64, clipped))
    }

    /// Pooled soft-Dice loss over the validation patches.
    pub fn validation_loss(&self) -> Result<f64, TrainError> {
        let mut inter = 0.0;
        let mut total = 0.0;
        for chunk in self.val_idx.chunks(self.config.batch_size) {
            let refs: Vec<&Patch> = chunk.iter().map(|&i| &self.pool[i]).collect();
            let (x, y) = batch_tensors::<T>(&refs);
            let p = self.net.predict(x)?;
            for (&pv, &tv) in p.data().iter().zip(y.data()) {
                let (pv, tv) = (pv.to_f64_lossy(), tv.to_f64_lossy());
                inter += pv * tv;
                total += pv + tv;
            }
        }
        let smooth = crate::nn::DICE_SMOOTH;
        Ok(1.0 - (2.0 * inter + smooth) / (total + smooth))
    }

    /// Runs one epoch; returns false once training has stopped.
    pub fn step_epoch(&mut self, hooks: &mut TrainHooks<'_>) -> Result<bool, TrainError> {
        if self.finished {
            return Ok(false);
        }
        let lr = self.lr;
        let (train_loss, clipped) = self.train_epoch()?;
        self.epoch += 1;
        let measured = self.validation_loss()?;
        let val_loss = hooks.validation.map_or(measured, |f| f(self.epoch, measured));
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch: self.epoch,
                message: format!("validation loss is {val_loss}"),
            });
        }
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss,
            val_loss,
            lr,
            clipped,
        };
        log::debug!(
            "{} seed {} epoch {}: train {:.5} val {:.5} lr {:e}",
            model_name(self.m),
            self.seed,
            self.epoch,
            train_loss,
            val_loss,
            lr
        );
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&record);
        }
        self.history.push(record);
        self.lr = self.scheduler.step(val_loss, self.lr);
        match self.early.update(self.epoch, val_loss) {
            StopDecision::Improved => self.best = NetSnapshot::capture(&self.net),
            StopDecision::Continue => {}
            StopDecision::Stop => self.finished = true,
        }
        if self.epoch >= self.config.max_epochs {
            self.finished = true;
        }
        Ok(!self.finished)
    }

    /// Trains until stopping, or until `pause_at` epochs have completed.
    pub fn run(&mut self, hooks: &mut TrainHooks<'_>, pause_at: Option<usize>) -> Result<(), TrainError> {
        while pause_at.is_none_or(|p| self.epoch < p) && self.step_epoch(hooks)? {}
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            version: crate::VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            m: self.m,
            input_channels: INPUT_CHANNELS,
            batch_norm: self.config.batch_norm,
            precision: self.config.precision,
            patch_size: self.config.patch_size,
            table: self.net.expansion().map(|e| (*e.table).clone()),
            epoch: self.epoch,
            lr: self.lr,
            finished: self.finished,
            best_epoch: self.early.best_epoch,
            weights: NetSnapshot::capture(&self.net),
            best_weights: self.best.clone(),
            adam: AdamRecord::capture(&self.adam),
            scheduler: self.scheduler.clone(),
            early_stopping: self.early.clone(),
            history: self.history.clone(),
        }
    }

    /// Restores the best-validation weights and scores them on the test set.
    pub fn finish(mut self) -> Result<RunOutcome, TrainError> {
        self.best.restore(&mut self.net)?;
        let counts = evaluate(&self.net, self.test, self.config.patch_size, self.config.batch_size)?;
        let mut report = RunReport::from_counts(
            model_name(self.m),
            self.m,
            self.seed,
            counts,
            self.epoch,
            self.early.best_epoch,
            self.net.parameter_count(),
            self.config.precision.as_str(),
            &self.config_hash,
        );
        report.prenormalized = self.config.prenormalized;
        let mut checkpoint = self.checkpoint();
        checkpoint.finished = true;
        Ok(RunOutcome { report, checkpoint })
    }
}

/// Probability map for a whole image, from edge-aligned tiles averaged where they overlap.
pub fn predict_image<T: Scalar>(
    net: &SegmentationNet<T>,
    sample: &AnnotatedSample,
    patch_size: usize,
    batch_size: usize,
) -> Result<Vec<f32>, TrainError> {
    let patches = make_patches(sample, patch_size, patch_size)?;
    let plane = patch_size * patch_size;
    let mut maps: Vec<Vec<f32>> = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size.max(1)) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let (x, _) = batch_tensors::<T>(&refs);
        let p = net.predict(x)?;
        for i in 0..chunk.len() {
            maps.push(p.data()[i * plane..(i + 1) * plane].iter().map(|v| v.to_f64_lossy() as f32).collect());
        }
    }
    let tiles: Vec<_> = patches.iter().zip(&maps).map(|(p, m)| (p.origin, &m[..])).collect();
    Ok(stitch(sample.height, sample.width, patch_size, &tiles))
}

/// Pooled confusion counts of `net` against the majority labels of `samples`.
pub fn evaluate<T: Scalar>(
    net: &SegmentationNet<T>,
    samples: &[AnnotatedSample],
    patch_size: usize,
    batch_size: usize,
) -> Result<ConfusionCounts, TrainError> {
    let mut total = ConfusionCounts::default();
    for s in samples {
        let prob = predict_image(net, s, patch_size, batch_size)?;
        let pred: Vec<u8> = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
        total.merge(&confusion(&pred, &s.majority)?);
    }
    Ok(total)
}

/// Trains one seeded run to completion.
pub fn train_one<T: Scalar>(
    config: &TrainConfig,
    m: usize,
    seed: u64,
    train: &[AnnotatedSample],
    test: &[AnnotatedSample],
    hooks: &mut TrainHooks<'_>,
) -> Result<RunOutcome, TrainError> {
    let mut t = Trainer::<T>::new(config, m, seed, train, test)?;
    t.run(hooks, None)?;
    t.finish()
}
