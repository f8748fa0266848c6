// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation harvesting and ReLU sparse autoencoders with unit-norm
//! decoder directions.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::{Partition, SeriesDataset};
use crate::error::{Error, Result};
use crate::forecaster::{ActivationHook, Forecaster};
use crate::nn::kernels::gemm_nn;
use crate::nn::{Graph, OptimizerState, Scalar, Tensor, Var};
use crate::trainer::for_each_prediction;

/// Default harvest cap on token rows.
pub const HARVEST_CAP: usize = 1_000_000;
/// A latent counts as active on a row when it exceeds this value.
pub const ACTIVITY_THRESHOLD: f64 = 1e-5;

const STORE_MAGIC: &[u8; 8] = b"FFNPACTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    /// Token rows produced by the harvest before truncation.
    pub rows_seen: usize,
}

/// Post-GELU activations `[rows × d_ff]`, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    pub d_ff: usize,
    pub data: Vec<f32>,
    pub meta: StoreMeta,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    rows: usize,
    d_ff: usize,
    meta: StoreMeta,
}

impl ActivationStore {
    pub fn rows(&self) -> usize {
        self.data.len() / self.d_ff.max(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d_ff..(i + 1) * self.d_ff]
    }

    /// Rows `idx` as a `[idx.len(), d_ff]` tensor.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut out = Vec::with_capacity(idx.len() * self.d_ff);
        for &i in idx {
            out.extend(self.row(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(vec![idx.len(), self.d_ff], out).expect("gather shape")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = StoreHeader {
            rows: self.rows(),
            d_ff: self.d_ff,
            meta: self.meta.clone(),
        };
        artifact::write(path, STORE_MAGIC, &header, |w| {
            artifact::write_f32s(w, self.data.iter().copied())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut r): (StoreHeader, _) = artifact::open(path, STORE_MAGIC)?;
        let data = artifact::read_f32s(&mut r, h.rows * h.d_ff, path)?;
        artifact::expect_eof(&mut r, path)?;
        Ok(Self {
            d_ff: h.d_ff,
            data,
            meta: h.meta,
        })
    }
}

/// Runs the frozen model over the training windows in chronological order
/// and keeps a uniform reservoir sample of at most `cap` token rows. When
/// the harvest produces no more than `cap` rows, all are kept in order.
pub fn harvest<T: Scalar>(
    model: &Forecaster<T>,
    dataset: &SeriesDataset,
    cap: usize,
    seed: u64,
) -> Result<ActivationStore> {
    harvest_partition(model, dataset, Partition::Train, cap, seed)
}

/// [`harvest`] over any partition.
pub fn harvest_partition<T: Scalar>(
    model: &Forecaster<T>,
    dataset: &SeriesDataset,
    partition: Partition,
    cap: usize,
    seed: u64,
) -> Result<ActivationStore> {
    let d_ff = model.config.d_ff;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f32> = Vec::new();
    let mut seen = 0usize;
    for_each_prediction(
        model,
        dataset,
        partition,
        crate::data::BATCH_SIZE,
        || Some(ActivationHook::record()),
        |_, _, hook| {
            let acts = hook.and_then(|mut h| h.take_recorded()).ok_or_else(|| {
                Error::Internal("record hook did not capture activations".into())
            })?;
            for row in acts.data().chunks(d_ff) {
                if seen < cap {
                    data.extend(row.iter().map(|v| v.to_f64() as f32));
                } else {
                    let j = rng.random_range(0..=seen);
                    if j < cap {
                        for (dst, v) in data[j * d_ff..(j + 1) * d_ff].iter_mut().zip(row) {
                            *dst = v.to_f64() as f32;
                        }
                    }
                }
                seen += 1;
            }
            Ok(())
        },
    )?;
    Ok(ActivationStore {
        d_ff,
        data,
        meta: StoreMeta {
            dataset: dataset.name.clone(),
            horizon: model.config.horizon,
            seed,
            rows_seen: seen,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub d_ff: usize,
    pub scale: f64,
    pub d_hidden: usize,
    pub lambda: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Relative improvement of the epoch loss that resets patience.
    pub improvement_threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps regardless of epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl SaeConfig {
    pub fn new(d_ff: usize, scale: f64, lambda: f64, seed: u64) -> Self {
        Self {
            d_ff,
            scale,
            d_hidden: (scale * d_ff as f64).round() as usize,
            lambda,
            lr: 1e-3,
            max_epochs: 50,
            patience: 3,
            improvement_threshold: 1e-3,
            batch_size: 1024,
            seed,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!(
                "SAE needs d_hidden ≥ 1 and d_ff ≥ 1, got {} and {}",
                self.d_hidden, self.d_ff
            )));
        }
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "invalid SAE hyperparameters: lambda {}, lr {}, batch {}",
                self.lambda, self.lr, self.batch_size
            )));
        }
        Ok(())
    }
}

/// `f = relu(x·W_enc + b_enc)`, `x̂ = f·W_dec + b_dec`. Row `i` of `w_dec`
/// is the decoder direction of latent `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T> {
    pub w_enc: Tensor<T>,
    pub b_enc: Tensor<T>,
    pub w_dec: Tensor<T>,
    pub b_dec: Tensor<T>,
}

const SAE_NAMES: [&str; 4] = ["encoder.weight", "encoder.bias", "decoder.weight", "decoder.bias"];

impl<T: Scalar> SaeParams<T> {
    /// Uniform encoder in `±1/sqrt(d_ff)`, random unit-norm decoder rows,
    /// zero biases.
    pub fn init(d_ff: usize, d_hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_ff as f64).sqrt();
        let w_enc = Tensor::uniform(&[d_ff, d_hidden], bound, &mut rng);
        let mut w_dec = Tensor::uniform(&[d_hidden, d_ff], 1.0, &mut rng);
        normalize_rows(&mut w_dec);
        Self {
            w_enc,
            b_enc: Tensor::zeros(&[d_hidden]),
            w_dec,
            b_dec: Tensor::zeros(&[d_ff]),
        }
    }

    pub fn d_ff(&self) -> usize {
        self.w_enc.shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.w_enc.shape()[1]
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            (SAE_NAMES[0], &self.w_enc),
            (SAE_NAMES[1], &self.b_enc),
            (SAE_NAMES[2], &self.w_dec),
            (SAE_NAMES[3], &self.b_dec),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_enc, &mut self.b_enc, &mut self.w_dec, &mut self.b_dec]
    }

    /// Largest `| ‖decoder row‖ − 1 |`.
    pub fn max_decoder_norm_deviation(&self) -> f64 {
        self.w_dec
            .data()
            .chunks(self.d_ff())
            .map(|r| (r.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Latent activations `[n, d_hidden]` of `x[n, d_ff]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (d_ff, h) = (self.d_ff(), self.d_hidden());
        if x.rank() != 2 || x.shape()[1] != d_ff {
            return Err(Error::Shape {
                op: "sae_encode",
                lhs: x.shape().to_vec(),
                rhs: self.w_enc.shape().to_vec(),
            });
        }
        let n = x.shape()[0];
        let mut f = vec![T::ZERO; n * h];
        gemm_nn(&mut f, x.data(), self.w_enc.data(), n, d_ff, h);
        for row in f.chunks_mut(h) {
            for (v, &b) in row.iter_mut().zip(self.b_enc.data()) {
                let z = *v + b;
                *v = if z > T::ZERO { z } else { T::ZERO };
            }
        }
        Tensor::new(vec![n, h], f)
    }

    /// Reconstruction `[n, d_ff]` of latents `f[n, d_hidden]`.
    pub fn decode(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let (d_ff, h) = (self.d_ff(), self.d_hidden());
        if f.rank() != 2 || f.shape()[1] != h {
            return Err(Error::Shape {
                op: "sae_decode",
                lhs: f.shape().to_vec(),
                rhs: self.w_dec.shape().to_vec(),
            });
        }
        let n = f.shape()[0];
        let mut out = vec![T::ZERO; n * d_ff];
        for row in out.chunks_mut(d_ff) {
            row.copy_from_slice(self.b_dec.data());
        }
        gemm_nn(&mut out, f.data(), self.w_dec.data(), n, h, d_ff);
        Tensor::new(vec![n, d_ff], out)
    }

    pub fn save(&self, path: &Path, config: &SaeConfig, meta: serde_json::Value) -> Result<()> {
        artifact::save_tensors(path, "sae", serde_json::to_value(config)?, meta, &self.named())
    }

    pub fn load(path: &Path) -> Result<(Self, SaeConfig, serde_json::Value)> {
        let (header, t) = artifact::load_tensors::<T>(path, "sae")?;
        let config: SaeConfig = serde_json::from_value(header.config)?;
        let [w_enc, b_enc, w_dec, b_dec]: [Tensor<T>; 4] = t
            .try_into()
            .map_err(|_| Error::Config("SAE checkpoint must hold 4 tensors".into()))?;
        let p = Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        };
        let (f, h) = (config.d_ff, config.d_hidden);
        if p.w_enc.shape() != [f, h] || p.b_enc.shape() != [h] || p.w_dec.shape() != [h, f] || p.b_dec.shape() != [f] {
            return Err(Error::Config(format!("SAE tensor shapes disagree with d_ff {f}, d_hidden {h}")));
        }
        Ok((p, config, header.meta))
    }
}

fn normalize_rows<T: Scalar>(w: &mut Tensor<T>) {
    let d = w.last_dim();
    for row in w.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            let inv = T::from_f64(1.0 / norm);
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

/// `(f, x̂)` for `x[n, d_ff]`.
pub fn sae_forward<T: Scalar>(sae: &SaeParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let f = sae.encode(x)?;
    let x_hat = sae.decode(&f)?;
    Ok((f, x_hat))
}

/// Mean over rows of `‖x − x̂‖² + λ‖f‖₁`.
pub fn sae_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>, f: &Tensor<T>, lambda: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() || f.rank() != 2 || f.shape()[0] != x.shape()[0] {
        return Err(Error::Shape {
            op: "sae_loss",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    let rows = x.shape()[0].max(1) as f64;
    let se: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum();
    let l1: f64 = f.data().iter().map(|v| v.to_f64().abs()).sum();
    Ok((se + lambda * l1) / rows)
}

/// Records the SAE objective on `g`. `v` holds the four parameter handles
/// in [`SaeParams::named`] order.
pub fn sae_loss_graph<T: Scalar>(g: &mut Graph<T>, v: &[Var], x: &Tensor<T>, lambda: f64) -> Result<Var> {
    let xv = g.constant(x.clone());
    let pre = g.matmul(xv, v[0])?;
    let pre = g.add_bias(pre, v[1])?;
    let f = g.relu(pre);
    let x_hat = g.matmul(f, v[2])?;
    let x_hat = g.add_bias(x_hat, v[3])?;
    let recon = g.row_sum_squared_error(x_hat, x)?;
    if lambda == 0.0 {
        return Ok(recon);
    }
    let l1 = g.mean_row_l1(f);
    let l1 = g.scale(l1, T::from_f64(lambda));
    g.add(recon, l1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainLog {
    pub epochs: Vec<SaeEpochRecord>,
    pub steps: usize,
    pub best_loss: f64,
    /// Largest decoder-norm deviation observed after any step.
    pub max_norm_deviation: f64,
}

/// Tolerance of the unit-norm decoder constraint after each step.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Minibatch Adam on the SAE objective, re-projecting decoder rows to unit
/// norm after every step. Stops after `patience` epochs without a relative
/// improvement of `improvement_threshold` on the epoch loss.
pub fn train_sae<T: Scalar>(store: &ActivationStore, cfg: &SaeConfig) -> Result<(SaeParams<T>, SaeTrainLog)> {
    cfg.validate()?;
    if store.rows() == 0 {
        return Err(Error::Config("activation store is empty".into()));
    }
    if store.d_ff != cfg.d_ff {
        return Err(Error::Config(format!(
            "store has d_ff {}, SAE config expects {}",
            store.d_ff, cfg.d_ff
        )));
    }
    let mut sae = SaeParams::<T>::init(cfg.d_ff, cfg.d_hidden, cfg.seed);
    let sizes: Vec<usize> = sae.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = OptimizerState::<T>::new(&sizes, cfg.lr, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..store.rows()).collect();
    let mut log = SaeTrainLog {
        epochs: Vec::new(),
        steps: 0,
        best_loss: f64::INFINITY,
        max_norm_deviation: sae.max_decoder_norm_deviation(),
    };
    let mut bad_epochs = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rows) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = store.gather::<T>(idx);
            let mut g = Graph::new();
            let vars: Vec<Var> = sae.named().iter().map(|(_, t)| g.param((*t).clone())).collect();
            let loss = sae_loss_graph(&mut g, &vars, &x, cfg.lambda)?;
            let lv = g.value(loss).item().to_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
            opt.step(&mut sae.tensors_mut(), &grads, &SAE_NAMES)?;
            normalize_rows(&mut sae.w_dec);
            let dev = sae.max_decoder_norm_deviation();
            if dev > UNIT_NORM_TOL {
                return Err(Error::Internal(format!("decoder norm deviates by {dev:e} after step {}", log.steps + 1)));
            }
            log.max_norm_deviation = log.max_norm_deviation.max(dev);
            log.steps += 1;
            loss_sum += lv * idx.len() as f64;
            rows += idx.len();
            if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                log.epochs.push(SaeEpochRecord {
                    epoch,
                    loss: loss_sum / rows as f64,
                    seconds: started.elapsed().as_secs_f64(),
                });
                break 'epochs;
            }
        }
        let loss = loss_sum / rows as f64;
        log.epochs.push(SaeEpochRecord {
            epoch,
            loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if loss < log.best_loss * (1.0 - cfg.improvement_threshold) {
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        log.best_loss = log.best_loss.min(loss);
        if bad_epochs >= cfg.patience {
            break;
        }
    }
    if let Some(last) = log.epochs.last() {
        log.best_loss = log.best_loss.min(last.loss);
    }
    Ok((sae, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Mean count of latents above the activity threshold per row.
    pub l0: f64,
    /// Mean over rows of the per-element mean squared reconstruction error.
    pub recon_mse: f64,
}

/// Rows per encode/decode pass in metric sweeps.
const METRIC_CHUNK: usize = 8192;

pub fn fidelity_metrics<T: Scalar>(sae: &SaeParams<T>, store: &ActivationStore, threshold: f64) -> Result<Fidelity> {
    let n = store.rows();
    if n == 0 {
        return Err(Error::Config("activation store is empty".into()));
    }
    let thr = T::from_f64(threshold);
    let (mut active, mut se) = (0usize, 0.0);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(METRIC_CHUNK) {
        let x = store.gather::<T>(chunk);
        let (f, x_hat) = sae_forward(sae, &x)?;
        active += f.data().iter().filter(|&&v| v > thr).count();
        se += x
            .data()
            .iter()
            .zip(x_hat.data())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
            .sum::<f64>();
    }
    Ok(Fidelity {
        l0: active as f64 / n as f64,
        recon_mse: se / (n * store.d_ff) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn store_from(rows: &[Vec<f32>]) -> ActivationStore {
        ActivationStore {
            d_ff: rows[0].len(),
            data: rows.concat(),
            meta: StoreMeta {
                dataset: "toy".into(),
                horizon: 1,
                seed: 0,
                rows_seen: rows.len(),
            },
        }
    }

    #[test]
    fn zero_input_decodes_to_bias() {
        let mut sae = SaeParams::<f64>::init(3, 4, 1);
        sae.b_enc = t(&[4], &[0.0, -1.0, -0.5, 0.0]);
        sae.b_dec = t(&[3], &[0.1, 0.2, 0.3]);
        let (f, x_hat) = sae_forward(&sae, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(f.data().iter().all(|v| *v == 0.0));
        assert_eq!(x_hat.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let sae = SaeParams::<f64>::init(3, 2, 7);
        let mut sae = sae;
        sae.b_enc = t(&[2], &[0.05, -0.02]);
        sae.b_dec = t(&[3], &[0.3, -0.1, 0.2]);
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
        let (f, x_hat) = sae_forward(&sae, &x).unwrap();
        for r in 0..2 {
            let mut fr = [0.0; 2];
            for j in 0..2 {
                let mut s = sae.b_enc.data()[j];
                for i in 0..3 {
                    s += x.data()[r * 3 + i] * sae.w_enc.data()[i * 2 + j];
                }
                fr[j] = s.max(0.0);
                assert!((f.data()[r * 2 + j] - fr[j]).abs() < 1e-6);
            }
            for i in 0..3 {
                let mut s = sae.b_dec.data()[i];
                for j in 0..2 {
                    s += fr[j] * sae.w_dec.data()[j * 3 + i];
                }
                assert!((x_hat.data()[r * 3 + i] - s).abs() < 1e-6);
            }
        }
        assert!(f.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn loss_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        assert_eq!(sae_loss(&x, &x, &Tensor::zeros(&[1, 3]), 0.01).unwrap(), 0.0);
        let f = t(&[1, 3], &[0.0, 2.0, 0.0]);
        assert!((sae_loss(&x, &x, &f, 0.01).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_loss_is_d_ff_times_mse() {
        let sae = SaeParams::<f64>::init(5, 7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[9, 5], 1.0, &mut rng);
        let (f, x_hat) = sae_forward(&sae, &x).unwrap();
        let loss = sae_loss(&x, &x_hat, &f, 0.0).unwrap();
        let mse = crate::forecaster::mse(&x_hat, &x).unwrap();
        assert!((loss - 5.0 * mse).abs() < 1e-7);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let sae = SaeParams::<f64>::init(4, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[8, 4], 1.0, &mut rng);
        let (f, x_hat) = sae_forward(&sae, &x).unwrap();
        let mut g = Graph::new();
        let v: Vec<Var> = sae.named().iter().map(|(_, t)| g.constant((*t).clone())).collect();
        let l = sae_loss_graph(&mut g, &v, &x, 0.03).unwrap();
        assert!((g.value(l).item() - sae_loss(&x, &x_hat, &f, 0.03).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_identity_is_learned() {
        let rows: Vec<Vec<f32>> = (0..512).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let store = store_from(&rows);
        let mut cfg = SaeConfig::new(2, 1.0, 1e-4, 3);
        cfg.batch_size = 32;
        cfg.lr = 1e-2;
        let (sae, log) = train_sae::<f64>(&store, &cfg).unwrap();
        let fid = fidelity_metrics(&sae, &store, ACTIVITY_THRESHOLD).unwrap();
        assert!(fid.recon_mse < 1e-3, "recon {} after {} epochs", fid.recon_mse, log.epochs.len());
        assert!(log.max_norm_deviation <= UNIT_NORM_TOL);
    }

    #[test]
    fn zero_sae_has_zero_l0() {
        let mut sae = SaeParams::<f64>::init(3, 5, 1);
        sae.w_enc.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let store = store_from(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        assert_eq!(fidelity_metrics(&sae, &store, ACTIVITY_THRESHOLD).unwrap().l0, 0.0);
    }

    #[test]
    fn store_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_from(&[vec![1.0, 2.0], vec![3.5, -4.25]]);
        let p = dir.path().join("acts.bin");
        store.save(&p).unwrap();
        assert_eq!(ActivationStore::load(&p).unwrap(), store);
    }

    #[test]
    fn sae_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sae = SaeParams::<f32>::init(4, 2, 9);
        let cfg = SaeConfig::new(4, 0.5, 0.01, 9);
        let p = dir.path().join("sae.ckpt");
        sae.save(&p, &cfg, serde_json::json!({"tag": 1})).unwrap();
        let (back, c, meta) = SaeParams::<f32>::load(&p).unwrap();
        assert_eq!(back, sae);
        assert_eq!(c, cfg);
        assert_eq!(meta["tag"], 1);
    }
}
