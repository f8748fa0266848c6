// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and the information its
//! vector-Jacobian product needs. [`Graph::backward`] walks the tape in
//! reverse insertion order, so node ids are a topological order and cycles
//! cannot be expressed.

use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::permute_into;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Patchify {
        x: Var,
        patch_len: usize,
        stride: usize,
    },
    RowAffine {
        x: Var,
        scale: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        weight: Var,
        bias: Var,
        channels: usize,
        inverse: bool,
        eps: T,
    },
    MeanSquaredError {
        pred: Var,
        target: Vec<T>,
    },
    RowSumSquaredError {
        pred: Var,
        target: Vec<T>,
        rows: usize,
    },
    MeanRowL1 {
        x: Var,
        rows: usize,
    },
    Sum {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`]: one optional gradient per recorded node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, `None` if `v` does not require grad or
    /// does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but returns zeros for untouched nodes.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Precomputed RoPE rotation tables for `positions × d_head/2` pairs.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    positions: usize,
    d_head: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    /// Angle for pair `i` at position `p` is `p * base^(-2i/d_head)`.
    pub fn new(positions: usize, d_head: usize, base: f64) -> Result<Self> {
        if d_head % 2 != 0 || d_head == 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head dimension, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / d_head as f64);
                let angle = p as f64 * theta;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Ok(Self {
            positions,
            d_head,
            cos,
            sin,
        })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a[..., k] · b[k, n]`, leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() < 1 || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let k = av.last_dim();
        let n = bv.shape()[1];
        let m = av.numel() / k.max(1);
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(&mut out, av.data(), bv.data(), m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Batched `a[.., m, k] · b[.., k, n]` (or `b[.., n, k]ᵀ` with `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 3 || bv.rank() != av.rank() {
            return Err(shape_err("batch_matmul", av.shape(), bv.shape()));
        }
        let r = av.rank();
        let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
        let (bk, n) = if trans_b {
            (bv.shape()[r - 1], bv.shape()[r - 2])
        } else {
            (bv.shape()[r - 2], bv.shape()[r - 1])
        };
        if bk != k || av.shape()[..r - 2] != bv.shape()[..r - 2] {
            return Err(shape_err("batch_matmul", av.shape(), bv.shape()));
        }
        let batch: usize = av.shape()[..r - 2].iter().product();
        let mut out = vec![T::ZERO; batch * m * n];
        for bi in 0..batch {
            let a_blk = &av.data()[bi * m * k..(bi + 1) * m * k];
            let b_blk = &bv.data()[bi * k * n..(bi + 1) * k * n];
            let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(c_blk, a_blk, b_blk, m, k, n);
            } else {
                gemm_nn(c_blk, a_blk, b_blk, m, k, n);
            }
        }
        let mut shape = av.shape().to_vec();
        shape[r - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.numel() != n {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last dimension.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.last_dim();
        if gv.numel() != d {
            return Err(shape_err("rmsnorm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut out = vec![T::ZERO; xv.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        let d_t = T::from_f64(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let ms = kernels::dot(row, row) / d_t;
            let inv = T::ONE / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &xi), &g) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(gv.data()) {
                *o = g * xi * inv;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Rotates consecutive pairs of `x[..., positions, d_head]` by position.
    pub fn rope(&mut self, x: Var, table: &RopeTable<T>) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 || xv.shape()[r - 1] != table.d_head || xv.shape()[r - 2] > table.positions {
            return Err(shape_err(
                "rope",
                xv.shape(),
                &[table.positions, table.d_head],
            ));
        }
        let positions = xv.shape()[r - 2];
        let dh = table.d_head;
        let half = dh / 2;
        let cos = table.cos[..positions * half].to_vec();
        let sin = table.sin[..positions * half].to_vec();
        let mut out = xv.data().to_vec();
        for (row_idx, row) in out.chunks_mut(dh).enumerate() {
            let p = row_idx % positions;
            for i in 0..half {
                let (c, s) = (cos[p * half + i], sin[p * half + i]);
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = x0 * c - x1 * s;
                row[2 * i + 1] = x0 * s + x1 * c;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Rope { x, cos, sin }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(d) {
            kernels::softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        // drop when a uniform u32 falls below p·2³²
        let threshold = (p * 4_294_967_296.0).min(u32::MAX as f64) as u32;
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.next_u32() < threshold { T::ZERO } else { keep_scale })
            .collect();
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `x[N, L] -> [N, P, patch_len]` with patch `p` covering `[p*stride, p*stride+patch_len)`.
    pub fn patchify(&mut self, x: Var, patch_len: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[1] < patch_len || stride == 0 || patch_len == 0 {
            return Err(shape_err("patchify", xv.shape(), &[patch_len, stride]));
        }
        let (n, l) = (xv.shape()[0], xv.shape()[1]);
        let p = (l - patch_len) / stride + 1;
        let mut out = Vec::with_capacity(n * p * patch_len);
        for row in 0..n {
            let series = &xv.data()[row * l..(row + 1) * l];
            for k in 0..p {
                out.extend_from_slice(&series[k * stride..k * stride + patch_len]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, p, patch_len], out)?,
            Op::Patchify {
                x,
                patch_len,
                stride,
            },
            rg,
        ))
    }

    /// `y[r, :] = x[r, :] * scale[r] + shift[r]` for `x` viewed as
    /// `[scale.len(), numel / scale.len()]`. Scale and shift are constants.
    pub fn row_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if scale.is_empty() || xv.numel() % scale.len() != 0 || scale.len() != shift.len() {
            return Err(shape_err("row_affine", xv.shape(), &[scale.len()]));
        }
        let d = xv.numel() / scale.len();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            for v in row.iter_mut() {
                *v = *v * scale[r] + shift[r];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RowAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Learnable per-channel affine on `x[R, D]` where row `r` belongs to
    /// channel `r % channels`. Forward: `x·w + b`; inverse: `(x − b)/(w + eps)`.
    pub fn channel_affine(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        inverse: bool,
        eps: T,
    ) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let channels = wv.numel();
        if xv.rank() != 2 || bv.numel() != channels || xv.shape()[0] % channels != 0 {
            return Err(shape_err("channel_affine", xv.shape(), wv.shape()));
        }
        let d = xv.shape()[1];
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let c = r % channels;
            let (w, b) = (wv.data()[c], bv.data()[c]);
            for v in row.iter_mut() {
                *v = if inverse { (*v - b) / (w + eps) } else { *v * w + b };
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ChannelAffine {
                x,
                weight,
                bias,
                channels,
                inverse,
                eps,
            },
            rg,
        ))
    }

    /// Mean over all elements of `(pred - target)²`.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("mse_loss", pv.shape(), target.shape()));
        }
        let n = T::from_f64(pv.numel() as f64);
        let sum: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(sum / n),
            Op::MeanSquaredError {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Squared error summed over the last dimension, averaged over rows.
    pub fn row_sum_squared_error(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("row_sum_squared_error", pv.shape(), target.shape()));
        }
        let rows = pv.rows();
        let sum: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(sum / T::from_f64(rows as f64)),
            Op::RowSumSquaredError {
                pred,
                target: target.data().to_vec(),
                rows,
            },
            rg,
        ))
    }

    /// L1 norm over the last dimension, averaged over rows.
    pub fn mean_row_l1(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let sum: T = xv.data().iter().map(|v| v.abs()).sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(sum / T::from_f64(rows as f64)),
            Op::MeanRowL1 { x, rows },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = kernels::dot(xv.data(), xv.data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(
        &self,
        idx: usize,
        op: &Op<T>,
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        // Returns the accumulation buffer for `v` if it needs a gradient.
        fn slot<'g, T: Scalar>(
            nodes: &[Node<T>],
            grads: &'g mut [Option<Vec<T>>],
            v: Var,
            current: usize,
        ) -> Result<Option<&'g mut Vec<T>>> {
            if v.0 >= current {
                return Err(Error::Internal(format!(
                    "tape order violated: node {current} reads node {}",
                    v.0
                )));
            }
            if !nodes[v.0].requires_grad {
                return Ok(None);
            }
            let len = nodes[v.0].value.numel();
            Ok(Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])))
        }
        let val = |v: Var| &nodes[v.0].value;

        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let k = av.last_dim();
                let n = bv.shape()[1];
                let m = av.numel() / k.max(1);
                if let Some(da) = slot(nodes, grads, *a, idx)? {
                    gemm_nt(da, dy, bv.data(), m, n, k);
                }
                if let Some(db) = slot(nodes, grads, *b, idx)? {
                    gemm_tn(db, av.data(), dy, k, m, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = if *trans_b {
                    bv.shape()[r - 2]
                } else {
                    bv.shape()[r - 1]
                };
                let batch: usize = av.shape()[..r - 2].iter().product();
                if let Some(da) = slot(nodes, grads, *a, idx)? {
                    for bi in 0..batch {
                        let dc = &dy[bi * m * n..(bi + 1) * m * n];
                        let b_blk = &bv.data()[bi * k * n..(bi + 1) * k * n];
                        let da_blk = &mut da[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(da_blk, dc, b_blk, m, n, k);
                        } else {
                            gemm_nt(da_blk, dc, b_blk, m, n, k);
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *b, idx)? {
                    for bi in 0..batch {
                        let dc = &dy[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let db_blk = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(db_blk, dc, a_blk, n, m, k);
                        } else {
                            gemm_tn(db_blk, a_blk, dc, k, m, n);
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let n = val(*bias).numel();
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
                if let Some(db) = slot(nodes, grads, *bias, idx)? {
                    for row in dy.chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, grads, v, idx)? {
                        for (di, &g) in d.iter_mut().zip(dy) {
                            *di += g;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g * *factor;
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for ((d, &g), &xi) in dx.iter_mut().zip(dy).zip(xv.data()) {
                        *d += g * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = val(*x);
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for ((d, &g), &xi) in dx.iter_mut().zip(dy).zip(xv.data()) {
                        if xi > T::ZERO {
                            *d += g;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (val(*x), val(*gain));
                let d = xv.last_dim();
                let d_t = T::from_f64(d as f64);
                if let Some(dg) = slot(nodes, grads, *gain, idx)? {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = xv.row(r);
                        let g_row = &dy[r * d..(r + 1) * d];
                        for j in 0..d {
                            dg[j] += g_row[j] * row[j] * inv;
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    let mut u = vec![T::ZERO; d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = xv.row(r);
                        let g_row = &dy[r * d..(r + 1) * d];
                        let mut proj = T::ZERO;
                        for j in 0..d {
                            u[j] = g_row[j] * gv.data()[j];
                            proj += u[j] * row[j] * inv;
                        }
                        proj /= d_t;
                        let dx_row = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dx_row[j] += inv * (u[j] - row[j] * inv * proj);
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                let xv = val(*x);
                let r = xv.rank();
                let positions = xv.shape()[r - 2];
                let dh = xv.shape()[r - 1];
                let half = dh / 2;
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (row_idx, (dx_row, g_row)) in
                        dx.chunks_mut(dh).zip(dy.chunks(dh)).enumerate()
                    {
                        let p = row_idx % positions;
                        for i in 0..half {
                            let (c, s) = (cos[p * half + i], sin[p * half + i]);
                            let (g0, g1) = (g_row[2 * i], g_row[2 * i + 1]);
                            dx_row[2 * i] += g0 * c + g1 * s;
                            dx_row[2 * i + 1] += g1 * c - g0 * s;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &nodes[idx].value;
                let d = y.last_dim();
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for ((dx_row, g_row), y_row) in
                        dx.chunks_mut(d).zip(dy.chunks(d)).zip(y.data().chunks(d))
                    {
                        let inner = kernels::dot(g_row, y_row);
                        for j in 0..d {
                            dx_row[j] += y_row[j] * (g_row[j] - inner);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for ((d, &g), &m) in dx.iter_mut().zip(dy).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
            }
            Op::Permute { x, perm } => {
                let shape = val(*x).shape().to_vec();
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    permute_into(dy, &shape, perm, dx, true);
                }
            }
            Op::Patchify {
                x,
                patch_len,
                stride,
            } => {
                let xv = val(*x);
                let (n, l) = (xv.shape()[0], xv.shape()[1]);
                let p = (l - patch_len) / stride + 1;
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for row in 0..n {
                        for k in 0..p {
                            let src = &dy[(row * p + k) * patch_len..(row * p + k + 1) * patch_len];
                            let dst = &mut dx[row * l + k * stride..row * l + k * stride + patch_len];
                            for (d, &g) in dst.iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                }
            }
            Op::RowAffine { x, scale } => {
                let d = val(*x).numel() / scale.len();
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (r, (dx_row, g_row)) in dx.chunks_mut(d).zip(dy.chunks(d)).enumerate() {
                        for (dv, &g) in dx_row.iter_mut().zip(g_row) {
                            *dv += g * scale[r];
                        }
                    }
                }
            }
            Op::ChannelAffine {
                x,
                weight,
                bias,
                channels,
                inverse,
                eps,
            } => {
                let (xv, wv, bv) = (val(*x), val(*weight), val(*bias));
                let d = xv.shape()[1];
                let c_of = |r: usize| r % channels;
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (r, (dx_row, g_row)) in dx.chunks_mut(d).zip(dy.chunks(d)).enumerate() {
                        let w = wv.data()[c_of(r)];
                        let factor = if *inverse { T::ONE / (w + *eps) } else { w };
                        for (dv, &g) in dx_row.iter_mut().zip(g_row) {
                            *dv += g * factor;
                        }
                    }
                }
                if let Some(dw) = slot(nodes, grads, *weight, idx)? {
                    for (r, (x_row, g_row)) in xv.data().chunks(d).zip(dy.chunks(d)).enumerate() {
                        let c = c_of(r);
                        let (w, b) = (wv.data()[c], bv.data()[c]);
                        let mut acc = T::ZERO;
                        for (&xi, &g) in x_row.iter().zip(g_row) {
                            acc += if *inverse {
                                -g * (xi - b) / ((w + *eps) * (w + *eps))
                            } else {
                                g * xi
                            };
                        }
                        dw[c] += acc;
                    }
                }
                if let Some(db) = slot(nodes, grads, *bias, idx)? {
                    for (r, g_row) in dy.chunks(d).enumerate() {
                        let c = c_of(r);
                        let w = wv.data()[c];
                        let s: T = g_row.iter().copied().sum();
                        db[c] += if *inverse { -s / (w + *eps) } else { s };
                    }
                }
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = val(*pred);
                let coef = dy[0] * T::from_f64(2.0 / pv.numel() as f64);
                if let Some(dp) = slot(nodes, grads, *pred, idx)? {
                    for ((d, &p), &t) in dp.iter_mut().zip(pv.data()).zip(target) {
                        *d += coef * (p - t);
                    }
                }
            }
            Op::RowSumSquaredError { pred, target, rows } => {
                let pv = val(*pred);
                let coef = dy[0] * T::from_f64(2.0 / *rows as f64);
                if let Some(dp) = slot(nodes, grads, *pred, idx)? {
                    for ((d, &p), &t) in dp.iter_mut().zip(pv.data()).zip(target) {
                        *d += coef * (p - t);
                    }
                }
            }
            Op::MeanRowL1 { x, rows } => {
                let xv = val(*x);
                let coef = dy[0] / T::from_f64(*rows as f64);
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (d, &v) in dx.iter_mut().zip(xv.data()) {
                        if v > T::ZERO {
                            *d += coef;
                        } else if v < T::ZERO {
                            *d -= coef;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for d in dx.iter_mut() {
                        *d += dy[0];
                    }
                }
            }
            Op::SumSquares { x } => {
                let xv = val(*x);
                if let Some(dx) = slot(nodes, grads, *x, idx)? {
                    for (d, &v) in dx.iter_mut().zip(xv.data()) {
                        *d += T::from_f64(2.0) * v * dy[0];
                    }
                }
            }
        }
        Ok(())
    }
}
