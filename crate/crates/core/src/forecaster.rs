// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-layer channel-independent patch transformer.
//!
//! ```text
//! x[B, L, C] -> RevIN -> [B·C, L] -> patches [B·C, P, patch_len] -> embed
//!   -> z + Attn(RMSNorm(z))            (RoPE multi-head self-attention)
//!   -> z + Down(GELU(Up(RMSNorm(z))))  (hook fires on the GELU output)
//!   -> flatten [B·C, P·d] -> head [B·C, H] -> RevIN⁻¹ -> y[B, H, C]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::nn::{Graph, RopeTable, Scalar, Tensor, Var, RMSNORM_EPS, ROPE_BASE};

/// Variance epsilon of instance normalization.
pub const REVIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub channels: usize,
    /// Learnable per-channel affine inside RevIN.
    pub revin_affine: bool,
    pub rope_base: f64,
}

impl ForecasterConfig {
    /// Standard configuration: `d_ff = 2·d_model`, patches 16/8 over 336
    /// steps, 4 heads from `d_model = 32` up and 2 below.
    pub fn new(d_model: usize, horizon: usize, channels: usize) -> Self {
        Self {
            d_model,
            d_ff: 2 * d_model,
            patch_len: 16,
            stride: 8,
            lookback: crate::data::LOOKBACK,
            horizon,
            n_heads: if d_model >= 32 { 4 } else { 2 },
            dropout: 0.2,
            channels,
            revin_affine: false,
            rope_base: ROPE_BASE,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 1
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.horizon == 0 || self.channels == 0 || self.n_heads == 0 {
            return fail(format!("zero-sized forecaster config: {self:?}"));
        }
        if self.d_ff != 2 * self.d_model {
            return fail(format!("d_ff must be 2·d_model, got {} for d_model {}", self.d_ff, self.d_model));
        }
        if self.lookback < self.patch_len || self.stride == 0 || self.patch_len == 0 {
            return fail(format!(
                "lookback {} cannot hold patches of {} with stride {}",
                self.lookback, self.patch_len, self.stride
            ));
        }
        if self.d_model % self.n_heads != 0 || self.d_head() % 2 != 0 {
            return fail(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (d, f, p) = (self.d_model, self.d_ff, self.num_patches());
        let embed = self.patch_len * d + d;
        let attn = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let norms = 2 * d;
        let head = p * d * self.horizon + self.horizon;
        let revin = if self.revin_affine { 2 * self.channels } else { 0 };
        embed + attn + ffn + norms + head + revin
    }
}

/// Trainable tensors, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterParams<T> {
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub norm_attn: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub norm_ffn: Tensor<T>,
    pub ffn_up_w: Tensor<T>,
    pub ffn_up_b: Tensor<T>,
    pub ffn_down_w: Tensor<T>,
    pub ffn_down_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub revin_w: Option<Tensor<T>>,
    pub revin_b: Option<Tensor<T>>,
}

const NAMES: [&str; 16] = [
    "embed.weight",
    "embed.bias",
    "norm_attn.gain",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "norm_ffn.gain",
    "ffn.up.weight",
    "ffn.up.bias",
    "ffn.down.weight",
    "ffn.down.bias",
    "head.weight",
    "head.bias",
    "revin.weight",
    "revin.bias",
];

impl<T: Scalar> ForecasterParams<T> {
    /// Fan-in scaled uniform init: weights and biases in `±1/sqrt(fan_in)`,
    /// norm gains 1, RevIN affine identity.
    pub fn init(cfg: &ForecasterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.horizon);
        let flat = cfg.num_patches() * d;
        let mut lin = |fan_in: usize, out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (
                Tensor::uniform(&[fan_in, out], bound, &mut rng),
                Tensor::uniform(&[out], bound, &mut rng),
            )
        };
        let (embed_w, embed_b) = lin(cfg.patch_len, d);
        let (wq, _) = lin(d, d);
        let (wk, _) = lin(d, d);
        let (wv, _) = lin(d, d);
        let (wo, _) = lin(d, d);
        let (ffn_up_w, ffn_up_b) = lin(d, f);
        let (ffn_down_w, ffn_down_b) = lin(f, d);
        let (head_w, head_b) = lin(flat, h);
        let (revin_w, revin_b) = if cfg.revin_affine {
            (
                Some(Tensor::full(&[cfg.channels], T::ONE)),
                Some(Tensor::zeros(&[cfg.channels])),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            embed_w,
            embed_b,
            norm_attn: Tensor::full(&[d], T::ONE),
            wq,
            wk,
            wv,
            wo,
            norm_ffn: Tensor::full(&[d], T::ONE),
            ffn_up_w,
            ffn_up_b,
            ffn_down_w,
            ffn_down_b,
            head_w,
            head_b,
            revin_w,
            revin_b,
        })
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v: Vec<(&'static str, &Tensor<T>)> = vec![
            (NAMES[0], &self.embed_w),
            (NAMES[1], &self.embed_b),
            (NAMES[2], &self.norm_attn),
            (NAMES[3], &self.wq),
            (NAMES[4], &self.wk),
            (NAMES[5], &self.wv),
            (NAMES[6], &self.wo),
            (NAMES[7], &self.norm_ffn),
            (NAMES[8], &self.ffn_up_w),
            (NAMES[9], &self.ffn_up_b),
            (NAMES[10], &self.ffn_down_w),
            (NAMES[11], &self.ffn_down_b),
            (NAMES[12], &self.head_w),
            (NAMES[13], &self.head_b),
        ];
        if let (Some(w), Some(b)) = (&self.revin_w, &self.revin_b) {
            v.push((NAMES[14], w));
            v.push((NAMES[15], b));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.norm_attn,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.norm_ffn,
            &mut self.ffn_up_w,
            &mut self.ffn_up_b,
            &mut self.ffn_down_w,
            &mut self.ffn_down_b,
            &mut self.head_w,
            &mut self.head_b,
        ];
        if let (Some(w), Some(b)) = (&mut self.revin_w, &mut self.revin_b) {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    fn from_tensors(cfg: &ForecasterConfig, mut t: Vec<Tensor<T>>) -> Result<Self> {
        let expected = if cfg.revin_affine { 16 } else { 14 };
        if t.len() != expected {
            return Err(Error::Config(format!("expected {expected} tensors, found {}", t.len())));
        }
        let (revin_w, revin_b) = if cfg.revin_affine {
            let b = t.pop();
            (t.pop(), b)
        } else {
            (None, None)
        };
        let mut it = t.into_iter();
        let mut next = || it.next().expect("length checked");
        let p = Self {
            embed_w: next(),
            embed_b: next(),
            norm_attn: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            norm_ffn: next(),
            ffn_up_w: next(),
            ffn_up_b: next(),
            ffn_down_w: next(),
            ffn_down_b: next(),
            head_w: next(),
            head_b: next(),
            revin_w,
            revin_b,
        };
        let fresh = Self::init(cfg, 0)?;
        for ((name, a), (_, b)) in p.named().into_iter().zip(fresh.named()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(p)
    }
}

/// Intervention at the post-GELU FFN activation, viewed as `[tokens, d_ff]`
/// with tokens ordered `(batch, channel, patch)`.
pub enum ActivationHook<'a, T> {
    /// Copy the live activation into the slot; the forward is unchanged.
    Record(Option<Tensor<T>>),
    /// Substitute a tensor of exactly the live shape.
    Replace(Tensor<T>),
    /// Substitute zeros.
    Zero,
    /// Substitute a function of the live activation.
    Map(&'a dyn Fn(&Tensor<T>) -> Result<Tensor<T>>),
}

impl<T> ActivationHook<'_, T> {
    pub fn record() -> Self {
        ActivationHook::Record(None)
    }

    /// The recorded activation after a `Record` forward.
    pub fn take_recorded(&mut self) -> Option<Tensor<T>> {
        match self {
            ActivationHook::Record(slot) => slot.take(),
            _ => None,
        }
    }
}

/// Per-(window, channel) statistics, indexed `b·C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Mean and `sqrt(var + eps)` over time for every (window, channel) of `x[B, L, C]`.
pub fn revin_stats<T: Scalar>(x: &Tensor<T>) -> Result<RevinStats<T>> {
    if x.rank() != 3 {
        return Err(Error::Shape {
            op: "revin",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    let d = x.data();
    for bi in 0..b {
        for ci in 0..c {
            let at = |t: usize| d[(bi * l + t) * c + ci].to_f64();
            let m = (0..l).map(at).sum::<f64>() / l as f64;
            let var = (0..l).map(|t| (at(t) - m).powi(2)).sum::<f64>() / l as f64;
            mean.push(T::from_f64(m));
            std.push(T::from_f64((var + REVIN_EPS).sqrt()));
        }
    }
    Ok(RevinStats { mean, std })
}

/// Standardizes every (window, channel) series of `x[B, L, C]` over time.
pub fn revin_normalize<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, RevinStats<T>)> {
    let stats = revin_stats(x)?;
    let c = x.shape()[2];
    let l = x.shape()[1];
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = (i / (l * c)) * c + i % c;
        *v = (*v - stats.mean[k]) / stats.std[k];
    }
    Ok((out, stats))
}

/// Inverse of [`revin_normalize`] for `y[B, H, C]`.
pub fn revin_denormalize<T: Scalar>(y: &Tensor<T>, stats: &RevinStats<T>) -> Result<Tensor<T>> {
    if y.rank() != 3 || y.shape()[0] * y.shape()[2] != stats.mean.len() {
        return Err(Error::Shape {
            op: "revin_denormalize",
            lhs: y.shape().to_vec(),
            rhs: vec![stats.mean.len()],
        });
    }
    let (h, c) = (y.shape()[1], y.shape()[2]);
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let k = (i / (h * c)) * c + i % c;
        *v = *v * stats.std[k] + stats.mean[k];
    }
    Ok(out)
}

/// `x[N, L] -> [N, P, patch_len]`.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch_len: usize, stride: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let p = g.patchify(v, patch_len, stride)?;
    Ok(g.value(p).clone())
}

/// Graph handles of bound parameters, in [`ForecasterParams::named`] order.
#[derive(Debug, Clone)]
pub struct BoundParams(pub Vec<Var>);

/// Model configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster<T> {
    pub config: ForecasterConfig,
    pub params: ForecasterParams<T>,
}

impl<T: Scalar> Forecaster<T> {
    pub fn new(config: ForecasterConfig, seed: u64) -> Result<Self> {
        let params = ForecasterParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Records the parameters on `g`, as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .named()
                .into_iter()
                .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    /// Records the forward pass of `x[B, L, C]` on `g` and returns the
    /// prediction `[B, H, C]`. Dropout is active iff `rng` is given.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: &Tensor<T>,
        hook: Option<&mut ActivationHook<'_, T>>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if x.rank() != 3 || x.shape()[1] != cfg.lookback || x.shape()[2] != cfg.channels {
            return Err(Error::Config(format!(
                "forecaster expects input [batch, {}, {}], got {:?}",
                cfg.lookback,
                cfg.channels,
                x.shape()
            )));
        }
        let (b, l, c) = (x.shape()[0], cfg.lookback, cfg.channels);
        let n = b * c;
        let (d, heads, dh, np) = (cfg.d_model, cfg.n_heads, cfg.d_head(), cfg.num_patches());
        let v = &p.0;

        let stats = revin_stats(x)?;
        let series = g.constant(x.permute(&[0, 2, 1])?.reshape(&[n, l])?);
        let inv_std: Vec<T> = stats.std.iter().map(|&s| T::ONE / s).collect();
        let shift: Vec<T> = stats.mean.iter().zip(&inv_std).map(|(&m, &is)| -m * is).collect();
        let mut z = g.row_affine(series, &inv_std, &shift)?;
        if cfg.revin_affine {
            z = g.channel_affine(z, v[14], v[15], false, T::ZERO)?;
        }

        let patches = g.patchify(z, cfg.patch_len, cfg.stride)?;
        let e = g.matmul(patches, v[0])?;
        let z = g.add_bias(e, v[1])?;

        // attention block
        let h = g.rmsnorm(z, v[2], T::from_f64(RMSNORM_EPS))?;
        let table = RopeTable::new(np, dh, cfg.rope_base)?;
        let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
            let t = g.reshape(t, &[n, np, heads, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = g.matmul(h, v[3])?;
        let q = split(g, q)?;
        let q = g.rope(q, &table)?;
        let k = g.matmul(h, v[4])?;
        let k = split(g, k)?;
        let k = g.rope(k, &table)?;
        let vv = g.matmul(h, v[5])?;
        let vv = split(g, vv)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let mut attn = g.softmax(scores);
        if let Some(r) = rng.as_deref_mut() {
            attn = g.dropout(attn, cfg.dropout, r);
        }
        let ctx = g.batch_matmul(attn, vv, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, np, d])?;
        let o = g.matmul(ctx, v[6])?;
        let z = g.add(z, o)?;

        // FFN block
        let h = g.rmsnorm(z, v[7], T::from_f64(RMSNORM_EPS))?;
        let u = g.matmul(h, v[8])?;
        let u = g.add_bias(u, v[9])?;
        let mut a = g.gelu(u);
        if let Some(hook) = hook {
            a = apply_hook(g, a, hook, [n, np, cfg.d_ff])?;
        }
        if let Some(r) = rng.as_deref_mut() {
            a = g.dropout(a, cfg.dropout, r);
        }
        let down = g.matmul(a, v[10])?;
        let down = g.add_bias(down, v[11])?;
        let z = g.add(z, down)?;

        let flat = g.reshape(z, &[n, np * d])?;
        let y = g.matmul(flat, v[12])?;
        let mut y = g.add_bias(y, v[13])?;
        if cfg.revin_affine {
            y = g.channel_affine(y, v[14], v[15], true, T::from_f64(REVIN_EPS * REVIN_EPS))?;
        }
        let y = g.row_affine(y, &stats.std, &stats.mean)?;
        let y = g.reshape(y, &[b, c, cfg.horizon])?;
        g.permute(y, &[0, 2, 1])
    }

    /// Inference forward (dropout off).
    pub fn predict(&self, x: &Tensor<T>, hook: Option<&mut ActivationHook<'_, T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let y = self.forward_graph(&mut g, &p, x, hook, None)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::save_tensors(
            path,
            "forecaster",
            serde_json::to_value(&self.config)?,
            serde_json::Value::Null,
            &self.params.named(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = artifact::load_tensors::<T>(path, "forecaster")?;
        let config: ForecasterConfig = serde_json::from_value(header.config)?;
        config.validate()?;
        let params = ForecasterParams::from_tensors(&config, tensors)?;
        Ok(Self { config, params })
    }
}

fn apply_hook<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    hook: &mut ActivationHook<'_, T>,
    shape: [usize; 3],
) -> Result<Var> {
    let tokens = shape[0] * shape[1];
    let flat_shape = [tokens, shape[2]];
    let check = |t: &Tensor<T>| -> Result<()> {
        if t.shape() != flat_shape {
            return Err(Error::Config(format!(
                "hook substitute has shape {:?}, live activation is {:?}",
                t.shape(),
                flat_shape
            )));
        }
        Ok(())
    };
    let substitute = match hook {
        ActivationHook::Record(slot) => {
            *slot = Some(g.value(a).clone().reshape(&flat_shape)?);
            return Ok(a);
        }
        ActivationHook::Replace(t) => {
            check(t)?;
            t.clone()
        }
        ActivationHook::Zero => Tensor::zeros(&flat_shape),
        ActivationHook::Map(f) => {
            let live = g.value(a).clone().reshape(&flat_shape)?;
            let t = f(&live)?;
            check(&t)?;
            t
        }
    };
    Ok(g.constant(substitute.reshape(&shape)?))
}

/// Mean squared error over all elements, accumulated in f64.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    error_sums(pred, target).map(|(se, _, n)| se / n as f64)
}

/// Mean absolute error over all elements, accumulated in f64.
pub fn mae<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    error_sums(pred, target).map(|(_, ae, n)| ae / n as f64)
}

/// `(Σ squared error, Σ absolute error, count)`.
pub fn error_sums<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, f64, usize)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "metric",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let e = p.to_f64() - t.to_f64();
        se += e * e;
        ae += e.abs();
    }
    Ok((se, ae, pred.numel()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg(channels: usize) -> ForecasterConfig {
        ForecasterConfig {
            lookback: 64,
            horizon: 12,
            ..ForecasterConfig::new(16, 12, channels)
        }
    }

    fn input(b: usize, l: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * l * c).map(|i| (i as f64 * 0.05).sin() * 2.0 + rng.random_range(-0.5..0.5)).collect();
        Tensor::new(vec![b, l, c], data).unwrap()
    }

    #[test]
    fn standard_config_shapes() {
        let cfg = ForecasterConfig::new(16, 96, 7);
        assert_eq!(cfg.num_patches(), 41);
        assert_eq!(cfg.d_ff, 32);
        assert_eq!(cfg.n_heads, 2);
        assert_eq!(ForecasterConfig::new(128, 96, 1).n_heads, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn param_count_matches_closed_form() {
        for (d, h, affine) in [(16, 96, false), (64, 720, true), (96, 192, false), (4, 3, true)] {
            let mut cfg = ForecasterConfig::new(d, h, 3);
            cfg.revin_affine = affine;
            let p = ForecasterParams::<f32>::init(&cfg, 1).unwrap();
            assert_eq!(p.count(), cfg.param_count());
        }
        // d=16, H=96: 16·16+16 + 4·256 + (16·32+32+32·16+16) + 32 + 41·16·96+96
        assert_eq!(ForecasterConfig::new(16, 96, 7).param_count(), 272 + 1024 + 1072 + 32 + 63072);
    }

    #[test]
    fn revin_constant_channel_and_oracle() {
        let x = Tensor::new(vec![1, 4, 1], vec![3.0f64; 4]).unwrap();
        let (y, st) = revin_normalize(&x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        assert_eq!(st.mean[0], 3.0);
        assert!((st.std[0] - REVIN_EPS.sqrt()).abs() < 1e-12);

        let ramp: Vec<f64> = (1..=336).map(f64::from).collect();
        let (_, st) = revin_normalize(&Tensor::new(vec![1, 336, 1], ramp.clone()).unwrap()).unwrap();
        let m = ramp.iter().sum::<f64>() / 336.0;
        let var = ramp.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 336.0;
        assert!((st.mean[0] - m).abs() < 1e-6);
        assert!((st.std[0] - (var + REVIN_EPS).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn revin_roundtrip() {
        let x = input(3, 50, 4, 2);
        let (y, st) = revin_normalize(&x).unwrap();
        let back = revin_denormalize(&y, &st).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn patch_layout() {
        let ramp: Vec<f64> = (0..336).map(f64::from).collect();
        let p = patchify(&Tensor::new(vec![1, 336], ramp).unwrap(), 16, 8).unwrap();
        assert_eq!(p.shape(), &[1, 41, 16]);
        let patch3: Vec<f64> = (24..40).map(f64::from).collect();
        assert_eq!(&p.data()[3 * 16..4 * 16], patch3.as_slice());
        // consecutive patches share 8 positions
        assert_eq!(&p.data()[8..16], &p.data()[16..24]);
    }

    #[test]
    fn zero_weights_forecast_window_mean() {
        let cfg = small_cfg(2);
        let mut m = Forecaster::<f64>::new(cfg, 3).unwrap();
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(2, 64, 2, 4);
        let y = m.predict(&x, None).unwrap();
        let (_, st) = revin_normalize(&x).unwrap();
        for bi in 0..2 {
            for t in 0..12 {
                for c in 0..2 {
                    let got = y.data()[(bi * 12 + t) * 2 + c];
                    assert!((got - st.mean[bi * 2 + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hook_modes() {
        let m = Forecaster::<f32>::new(small_cfg(3), 5).unwrap();
        let x = input(2, 64, 3, 6).cast::<f32>();
        let base = m.predict(&x, None).unwrap();

        let mut rec = ActivationHook::record();
        let recorded_run = m.predict(&x, Some(&mut rec)).unwrap();
        assert_eq!(recorded_run, base);
        let acts = rec.take_recorded().unwrap();
        assert_eq!(acts.shape(), &[2 * 3 * 7, 32]);

        let mut rep = ActivationHook::Replace(acts.clone());
        assert_eq!(m.predict(&x, Some(&mut rep)).unwrap(), base);

        let mut zero = ActivationHook::Zero;
        assert_ne!(m.predict(&x, Some(&mut zero)).unwrap(), base);

        let mut wrong = ActivationHook::Replace(Tensor::zeros(&[5, 32]));
        assert!(m.predict(&x, Some(&mut wrong)).is_err());
    }

    #[test]
    fn zero_ablation_is_null_when_ffn_down_is_zero() {
        let mut m = Forecaster::<f64>::new(small_cfg(1), 7).unwrap();
        m.params.ffn_down_w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.params.ffn_down_b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = input(2, 64, 1, 8);
        let base = m.predict(&x, None).unwrap();
        assert_eq!(m.predict(&x, Some(&mut ActivationHook::Zero)).unwrap(), base);
    }

    #[test]
    fn channel_permutation_equivariance() {
        let m = Forecaster::<f64>::new(small_cfg(3), 9).unwrap();
        let x = input(2, 64, 3, 10);
        let perm = [2usize, 0, 1];
        let mut xp = x.clone();
        for (i, v) in xp.data_mut().iter_mut().enumerate() {
            let (row, c) = (i / 3, i % 3);
            *v = x.data()[row * 3 + perm[c]];
        }
        let y = m.predict(&x, None).unwrap();
        let yp = m.predict(&xp, None).unwrap();
        for i in 0..yp.numel() {
            let (row, c) = (i / 3, i % 3);
            assert!((yp.data()[i] - y.data()[row * 3 + perm[c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_examples() {
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(mae(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(2);
        cfg.revin_affine = true;
        let m = Forecaster::<f32>::new(cfg, 11).unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let back = Forecaster::<f32>::load(&path).unwrap();
        assert_eq!(back, m);
        let x = input(2, 64, 2, 12).cast::<f32>();
        assert_eq!(back.predict(&x, None).unwrap(), m.predict(&x, None).unwrap());
        assert!(artifact::load_tensors::<f32>(&path, "sae").is_err());
    }
}
