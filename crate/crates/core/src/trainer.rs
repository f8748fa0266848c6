// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forecaster training: AdamW with clipping, plateau learning-rate decay and
//! validation early stopping.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Partition, SeriesDataset, WindowBatch};
use crate::error::{Error, Result};
use crate::forecaster::{error_sums, ActivationHook, Forecaster, ForecasterConfig};
use crate::nn::{clip_grad_norm, Graph, OptimizerState, Precision, Scalar, Tensor};

/// Upper bound on `windows × channels` sequences per forward pass. Larger
/// batches are processed in chunks with gradient accumulation.
pub const MAX_SEQUENCES_PER_PASS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Print one line per epoch to stderr.
    #[serde(default)]
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 80,
            patience: 15,
            lr: 2e-4,
            weight_decay: 0.0,
            clip_norm: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 3,
            min_lr: 1e-6,
            batch_size: crate::data::BATCH_SIZE,
            seed: 42,
            precision: Precision::F32,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.plateau_patience >= self.patience {
            return Err(Error::Config(format!(
                "scheduler patience {} must be below early-stop patience {}",
                self.plateau_patience, self.patience
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {} outside (0, 1)", self.plateau_factor)));
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate once `patience` consecutive
/// epochs fail to strictly improve on the best value seen.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation value, returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NotImproved,
    Stop,
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
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

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::NotImproved
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainLog {
    /// The log without wall-clock times, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainLog {
        let mut log = self.clone();
        log.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        log
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for e in &self.epochs {
            w.serialize(e).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Windows per forward pass so that `windows × channels` stays bounded.
pub fn windows_per_pass(channels: usize) -> usize {
    (MAX_SEQUENCES_PER_PASS / channels.max(1)).max(1)
}

/// Splits a batch along the window axis into `[start, end)` ranges.
fn chunks(batch_windows: usize, channels: usize) -> Vec<(usize, usize)> {
    let step = windows_per_pass(channels);
    (0..batch_windows)
        .step_by(step)
        .map(|s| (s, (s + step).min(batch_windows)))
        .collect()
}

fn slice_windows<T: Scalar>(t: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * per..end * per].to_vec()).expect("window slice")
}

/// One optimizer step on a batch. Returns the batch MSE.
fn train_step<T: Scalar>(
    model: &mut Forecaster<T>,
    opt: &mut OptimizerState<T>,
    batch: &WindowBatch<T>,
    clip_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let names = model.params.names();
    let total = batch.inputs.shape()[0];
    let mut grads: Vec<Tensor<T>> = model
        .params
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut loss = 0.0;
    for (s, e) in chunks(total, model.config.channels) {
        let weight = (e - s) as f64 / total as f64;
        let x = slice_windows(&batch.inputs, s, e);
        let y = slice_windows(&batch.targets, s, e);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let pred = model.forward_graph(&mut g, &p, &x, None, Some(rng))?;
        let l = g.mse_loss(pred, &y)?;
        loss += weight * g.value(l).item().to_f64();
        let gr = g.backward(l)?;
        let w = T::from_f64(weight);
        for (acc, v) in grads.iter_mut().zip(&p.0) {
            let gv = gr.get_or_zeros(*v);
            for (a, &b) in acc.data_mut().iter_mut().zip(gv.data()) {
                *a += w * b;
            }
        }
    }
    clip_grad_norm(&mut grads, clip_norm);
    let mut params = model.params.tensors_mut();
    opt.step(&mut params, &grads, &names)?;
    Ok(loss)
}

/// Trains a fresh forecaster and returns the parameters of the best
/// validation epoch.
pub fn train_forecaster<T: Scalar>(
    dataset: &SeriesDataset,
    fc_config: &ForecasterConfig,
    cfg: &TrainConfig,
) -> Result<(Forecaster<T>, TrainLog)> {
    cfg.validate()?;
    if dataset.scaler().is_none() {
        return Err(Error::Config(format!("dataset `{}` must be scaled before training", dataset.name)));
    }
    if fc_config.channels != dataset.channels() {
        return Err(Error::Config(format!(
            "model expects {} channels, dataset `{}` has {}",
            fc_config.channels,
            dataset.name,
            dataset.channels()
        )));
    }
    let mut model = Forecaster::<T>::new(fc_config.clone(), cfg.seed)?;
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = OptimizerState::<T>::new(&sizes, cfg.lr, cfg.weight_decay);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut best = model.params.clone();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
    };
    let (lookback, horizon) = (fc_config.lookback, fc_config.horizon);

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let lr = opt.lr;
        let shuffle_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let stream = dataset.windows::<T>(Partition::Train, lookback, horizon, cfg.batch_size, Some(shuffle_seed));
        if stream.num_windows() == 0 {
            return Err(Error::Config(format!("dataset `{}` has no training windows", dataset.name)));
        }
        let (mut loss_sum, mut windows) = (0.0, 0usize);
        for (bi, batch) in stream.enumerate() {
            let loss = train_step(&mut model, &mut opt, &batch, cfg.clip_norm, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let n = batch.starts.len();
            loss_sum += loss * n as f64;
            windows += n;
        }
        if !model.params.all_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let val = evaluate(&model, dataset, Partition::Val, cfg.batch_size)?.mse;
        let record = EpochRecord {
            epoch,
            train_mse: loss_sum / windows as f64,
            val_mse: val,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if cfg.verbose {
            eprintln!(
                "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}  {:.1}s",
                record.epoch, record.train_mse, record.val_mse, record.lr, record.seconds
            );
        }
        log.epochs.push(record);
        opt.lr = sched.step(val);
        let decision = stopper.observe(epoch, val);
        if decision == StopDecision::Improved {
            best = model.params.clone();
            log.best_epoch = epoch;
            log.best_val = val;
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    model.params = best;
    Ok((model, log))
}

/// Test-set style metrics in scaled space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Runs `f(batch, prediction)` over every window of a partition in
/// chronological order, dropout off. `hook` builds a fresh hook per pass.
pub fn for_each_prediction<'h, T, H, F>(
    model: &Forecaster<T>,
    dataset: &SeriesDataset,
    partition: Partition,
    batch_size: usize,
    mut hook: H,
    mut f: F,
) -> Result<()>
where
    T: Scalar,
    H: FnMut() -> Option<ActivationHook<'h, T>>,
    F: FnMut(&WindowBatch<T>, &Tensor<T>, Option<ActivationHook<'h, T>>) -> Result<()>,
{
    let cfg = &model.config;
    let per_pass = windows_per_pass(cfg.channels).min(batch_size.max(1));
    for batch in dataset.windows::<T>(partition, cfg.lookback, cfg.horizon, per_pass, None) {
        let mut h = hook();
        let pred = model.predict(&batch.inputs, h.as_mut())?;
        f(&batch, &pred, h)?;
    }
    Ok(())
}

/// MSE and MAE over all windows of a partition.
pub fn evaluate<T: Scalar>(
    model: &Forecaster<T>,
    dataset: &SeriesDataset,
    partition: Partition,
    batch_size: usize,
) -> Result<Metrics> {
    let (mut se, mut ae, mut n, mut windows) = (0.0, 0.0, 0usize, 0usize);
    for_each_prediction(model, dataset, partition, batch_size, || None, |batch, pred, _| {
        let (s, a, k) = error_sums(pred, &batch.targets)?;
        se += s;
        ae += a;
        n += k;
        windows += batch.starts.len();
        Ok(())
    })?;
    if n == 0 {
        return Err(Error::Config(format!(
            "partition {partition:?} of `{}` has no windows for horizon {}",
            dataset.name, model.config.horizon
        )));
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        windows,
    })
}
