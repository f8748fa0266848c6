// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe battery on a trained forecaster: reconstruction substitution,
//! dead-latent census, top-k latent amplification, FFN zero ablation and
//! the sparsity-penalty sweep.

use serde::{Deserialize, Serialize};

use crate::data::{Partition, SeriesDataset};
use crate::error::{Error, Result};
use crate::forecaster::{ActivationHook, Forecaster};
use crate::nn::{Scalar, Tensor};
use crate::sae::{fidelity_metrics, sae_forward, train_sae, ActivationStore, SaeConfig, SaeParams};
use crate::trainer::for_each_prediction;

/// `100·(probe − base)/base`.
pub fn degradation_pct(base_mse: f64, probe_mse: f64) -> f64 {
    100.0 * (probe_mse - base_mse) / base_mse
}

/// Squared-error mean of each window of `pred`/`target` `[B, H, C]`.
fn window_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Vec<f64> {
    let per = pred.numel() / pred.shape()[0];
    pred.data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
                .sum::<f64>()
                / per as f64
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Test-set MSE with its per-window breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedMse {
    pub mse: f64,
    pub mae: f64,
    pub per_window: Vec<f64>,
}

fn check_d_ff<T: Scalar>(model: &Forecaster<T>, sae: &SaeParams<T>) -> Result<()> {
    if sae.d_ff() != model.config.d_ff {
        return Err(Error::Config(format!(
            "SAE was trained on d_ff {} but the forecaster has d_ff {}",
            sae.d_ff(),
            model.config.d_ff
        )));
    }
    Ok(())
}

/// Test-set forecast error with an optional hook built per pass.
pub fn hooked_test_mse<'h, T, H>(
    model: &Forecaster<T>,
    dataset: &SeriesDataset,
    hook: H,
) -> Result<WindowedMse>
where
    T: Scalar,
    H: FnMut() -> Option<ActivationHook<'h, T>>,
{
    let mut per_window = Vec::new();
    let (mut ae, mut n) = (0.0, 0usize);
    for_each_prediction(model, dataset, Partition::Test, crate::data::BATCH_SIZE, hook, |batch, pred, _| {
        per_window.extend(window_mse(pred, &batch.targets));
        for (&p, &t) in pred.data().iter().zip(batch.targets.data()) {
            ae += (p.to_f64() - t.to_f64()).abs();
        }
        n += pred.numel();
        Ok(())
    })?;
    if per_window.is_empty() {
        return Err(Error::Config(format!("`{}` has no test windows", dataset.name)));
    }
    Ok(WindowedMse {
        mse: mean(&per_window),
        mae: ae / n as f64,
        per_window,
    })
}

pub fn base_eval<T: Scalar>(model: &Forecaster<T>, dataset: &SeriesDataset) -> Result<WindowedMse> {
    hooked_test_mse(model, dataset, || None)
}

/// Forecast error when the post-GELU activation is replaced by its SAE
/// reconstruction, computed inline at the hook.
pub fn substitution_eval<T: Scalar>(
    model: &Forecaster<T>,
    sae: &SaeParams<T>,
    dataset: &SeriesDataset,
) -> Result<WindowedMse> {
    check_d_ff(model, sae)?;
    let reconstruct = |x: &Tensor<T>| sae_forward(sae, x).map(|(_, x_hat)| x_hat);
    hooked_test_mse(model, dataset, || Some(ActivationHook::Map(&reconstruct)))
}

/// Forecast error with the post-GELU activation zeroed. The FFN then adds
/// only its down-projection bias to the residual stream.
pub fn zero_ablation<T: Scalar>(model: &Forecaster<T>, dataset: &SeriesDataset) -> Result<WindowedMse> {
    hooked_test_mse(model, dataset, || Some(ActivationHook::Zero))
}

/// Per-latent maximum and sum of activations over every test token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub max: Vec<f64>,
    pub sum: Vec<f64>,
    pub rows: usize,
}

impl LatentStats {
    pub fn new(d_hidden: usize) -> Self {
        Self {
            max: vec![0.0; d_hidden],
            sum: vec![0.0; d_hidden],
            rows: 0,
        }
    }

    /// Folds latent rows `f[n, d_hidden]` into the statistics.
    pub fn absorb<T: Scalar>(&mut self, f: &Tensor<T>) {
        let h = self.max.len();
        for row in f.data().chunks(h) {
            for (j, &v) in row.iter().enumerate() {
                let v = v.to_f64();
                if v > self.max[j] {
                    self.max[j] = v;
                }
                self.sum[j] += v;
            }
            self.rows += 1;
        }
    }
}

pub fn latent_stats<T: Scalar>(
    model: &Forecaster<T>,
    sae: &SaeParams<T>,
    dataset: &SeriesDataset,
) -> Result<LatentStats> {
    check_d_ff(model, sae)?;
    let mut stats = LatentStats::new(sae.d_hidden());
    for_each_prediction(
        model,
        dataset,
        Partition::Test,
        crate::data::BATCH_SIZE,
        || Some(ActivationHook::record()),
        |_, _, hook| {
            let acts = hook
                .and_then(|mut h| h.take_recorded())
                .ok_or_else(|| Error::Internal("record hook captured nothing".into()))?;
            stats.absorb(&sae.encode(&acts)?);
            Ok(())
        },
    )?;
    Ok(stats)
}

/// Percentage of latents whose maximum activation never exceeds `threshold`.
pub fn dead_latent_rate(max_activation: &[f64], threshold: f64) -> f64 {
    if max_activation.is_empty() {
        return 0.0;
    }
    let dead = max_activation.iter().filter(|&&m| !(m > threshold)).count();
    100.0 * dead as f64 / max_activation.len() as f64
}

pub fn dead_latent_census<T: Scalar>(
    model: &Forecaster<T>,
    sae: &SaeParams<T>,
    dataset: &SeriesDataset,
    threshold: f64,
) -> Result<f64> {
    Ok(dead_latent_rate(&latent_stats(model, sae, dataset)?.max, threshold))
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("top-{k} requested from {} latents", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// The `k` latents with the largest total activation over the test set.
pub fn top_k_latents<T: Scalar>(
    model: &Forecaster<T>,
    sae: &SaeParams<T>,
    dataset: &SeriesDataset,
    k: usize,
) -> Result<Vec<usize>> {
    top_k(&latent_stats(model, sae, dataset)?.sum, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentShift {
    pub latent: usize,
    /// MAE between the un-hooked and the intervened forecast.
    pub shift_mae: f64,
    /// MAE between the plain-substitution and the intervened forecast.
    pub shift_vs_substitution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalResult {
    pub factor: f64,
    pub latents: Vec<LatentShift>,
    pub mean_shift: f64,
    pub max_shift: f64,
    pub mean_shift_vs_substitution: f64,
}

/// How the selected latents are amplified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amplification {
    /// One forward per latent, only that latent scaled.
    OneAtATime,
    /// A single forward with all selected latents scaled.
    Simultaneous,
}

/// Amplifies the given latents by `factor` before decoding, substitutes the
/// result at the hook and measures the forecast shift in scaled space.
pub fn causal_intervention<T: Scalar>(
    model: &Forecaster<T>,
    sae: &SaeParams<T>,
    dataset: &SeriesDataset,
    latents: &[usize],
    factor: f64,
    mode: Amplification,
) -> Result<CausalResult> {
    check_d_ff(model, sae)?;
    let h = sae.d_hidden();
    if let Some(&bad) = latents.iter().find(|&&l| l >= h) {
        return Err(Error::Config(format!("latent {bad} out of range for {h} latents")));
    }
    let groups: Vec<Vec<usize>> = match mode {
        Amplification::OneAtATime => latents.iter().map(|&l| vec![l]).collect(),
        Amplification::Simultaneous => vec![latents.to_vec()],
    };
    let fac = T::from_f64(factor);
    let mut vs_orig = vec![0.0; groups.len()];
    let mut vs_sub = vec![0.0; groups.len()];
    let mut n = 0usize;
    for_each_prediction(
        model,
        dataset,
        Partition::Test,
        crate::data::BATCH_SIZE,
        || Some(ActivationHook::record()),
        |batch, original, hook| {
            let acts = hook
                .and_then(|mut h| h.take_recorded())
                .ok_or_else(|| Error::Internal("record hook captured nothing".into()))?;
            let (f, x_hat) = sae_forward(sae, &acts)?;
            let substituted = model.predict(&batch.inputs, Some(&mut ActivationHook::Replace(x_hat)))?;
            for (gi, group) in groups.iter().enumerate() {
                let mut fa = f.clone();
                for row in fa.data_mut().chunks_mut(h) {
                    for &l in group {
                        row[l] *= fac;
                    }
                }
                let x_amp = sae.decode(&fa)?;
                let pred = model.predict(&batch.inputs, Some(&mut ActivationHook::Replace(x_amp)))?;
                for ((&p, &o), &s) in pred.data().iter().zip(original.data()).zip(substituted.data()) {
                    vs_orig[gi] += (p.to_f64() - o.to_f64()).abs();
                    vs_sub[gi] += (p.to_f64() - s.to_f64()).abs();
                }
            }
            n += original.numel();
            Ok(())
        },
    )?;
    if n == 0 {
        return Err(Error::Config(format!("`{}` has no test windows", dataset.name)));
    }
    let shifts: Vec<LatentShift> = groups
        .iter()
        .zip(vs_orig.iter().zip(&vs_sub))
        .map(|(g, (&o, &s))| LatentShift {
            latent: g[0],
            shift_mae: o / n as f64,
            shift_vs_substitution: s / n as f64,
        })
        .collect();
    let orig: Vec<f64> = shifts.iter().map(|s| s.shift_mae).collect();
    let sub: Vec<f64> = shifts.iter().map(|s| s.shift_vs_substitution).collect();
    Ok(CausalResult {
        factor,
        mean_shift: mean(&orig),
        max_shift: orig.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_shift_vs_substitution: mean(&sub),
        latents: shifts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub scale: f64,
    pub lambda: f64,
    pub l0: f64,
    pub recon_mse: f64,
}

/// Trains one SAE per `(scale, λ)` on the same store and seed; fidelity is
/// measured on `eval_store`.
pub fn lambda_sweep(
    store: &ActivationStore,
    eval_store: &ActivationStore,
    scales: &[f64],
    lambdas: &[f64],
    template: &SaeConfig,
    threshold: f64,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &scale in scales {
        for &lambda in lambdas {
            let cfg = SaeConfig {
                scale,
                d_hidden: (scale * template.d_ff as f64).round() as usize,
                lambda,
                ..template.clone()
            };
            let (sae, _) = train_sae::<f32>(store, &cfg)?;
            let fid = fidelity_metrics(&sae, eval_store, threshold)?;
            cells.push(SweepCell {
                scale,
                lambda,
                l0: fid.l0,
                recon_mse: fid.recon_mse,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degradation_formula() {
        let d = degradation_pct(0.1303, 0.3015);
        assert!((d - 131.38910207214118).abs() < 1e-9);
        assert_eq!(format!("{d:+.1}"), "+131.4");
        assert!(degradation_pct(1.0, 0.991) < 0.0);
    }

    #[test]
    fn top_k_ties_and_full_sort() {
        let mut s = vec![0.0; 12];
        s[7] = 3.0;
        assert_eq!(top_k(&s, 10).unwrap(), vec![7, 0, 1, 2, 3, 4, 5, 6, 8, 9]);
        let s = [0.5, 2.0, 1.0, 2.0];
        assert_eq!(top_k(&s, 4).unwrap(), vec![1, 3, 2, 0]);
        assert!(top_k(&s, 5).is_err());
    }

    #[test]
    fn dead_rate_bounds_and_threshold_monotone() {
        let max = [0.0, 1e-6, 2e-5, 0.3];
        assert_eq!(dead_latent_rate(&max, 1e-5), 50.0);
        assert_eq!(dead_latent_rate(&max, 0.0), 25.0);
        assert_eq!(dead_latent_rate(&max, 1.0), 100.0);
    }

    #[test]
    fn latent_stats_fold() {
        let f = Tensor::new(vec![2, 3], vec![0.0f32, 1.0, 2.0, 0.5, 0.0, 4.0]).unwrap();
        let mut st = LatentStats::new(3);
        st.absorb(&f);
        assert_eq!(st.max, vec![0.5, 1.0, 4.0]);
        assert_eq!(st.sum, vec![0.5, 1.0, 6.0]);
        assert_eq!(st.rows, 2);
    }
}
