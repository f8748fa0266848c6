// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors, reverse-mode autodiff and the optimizer.
//!
//! The free functions in this module are value-level conveniences over the
//! same [`Graph`] ops used during training, so they share one implementation.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, RopeTable, Var};
pub use optim::{clip_grad_norm, global_norm, OptimizerState};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

use crate::error::Result;

/// RMSNorm epsilon used throughout the model.
pub const RMSNORM_EPS: f64 = 1e-6;
/// Default RoPE base frequency.
pub const ROPE_BASE: f64 = 10_000.0;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b)?;
    Ok(g.value(c).clone())
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::gelu)
}

pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, gain) = (g.constant(x.clone()), g.constant(gain.clone()));
    let y = g.rmsnorm(x, gain, T::from_f64(eps))?;
    Ok(g.value(y).clone())
}

/// Rotary embedding of `x[positions, d_head]` (leading batch dims allowed).
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, base: f64) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(crate::Error::Shape {
            op: "rope",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let table = RopeTable::new(x.shape()[r - 2], x.shape()[r - 1], base)?;
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.rope(v, &table)?;
    Ok(g.value(y).clone())
}

pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        kernels::softmax_row(row);
    }
    out
}
