// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters and moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Fresh state for parameters with the given element counts.
    pub fn new(param_sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update. `names` label parameters in error messages. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        names: &[&str],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: names.get(i).copied().unwrap_or("?").to_string(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let lr = T::from_f64(self.lr);
        let decay = T::from_f64(1.0 - self.lr * self.weight_decay);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.eps);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                if self.weight_decay != 0.0 {
                    *w *= decay;
                }
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = t(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = OptimizerState::<f64>::new(&[3], 1e-3, 0.0);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[t(&[0.0; 3])], &["p"]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = t(&[0.5]);
        let mut st = OptimizerState::<f64>::new(&[1], 0.1, 0.0);
        st.step(&mut [&mut p], &[t(&[1.0])], &["p"]).unwrap();
        // m_hat = v_hat = 1 at t = 1
        let expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = t(&[2.0, -4.0]);
        let mut st = OptimizerState::<f64>::new(&[2], 0.1, 0.01);
        st.step(&mut [&mut p], &[t(&[0.0, 0.0])], &["p"]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = t(&[1.0]);
        let mut b = t(&[1.0]);
        let mut st = OptimizerState::<f64>::new(&[1, 1], 0.1, 0.0);
        let err = st
            .step(&mut [&mut a, &mut b], &[t(&[0.0]), t(&[f64::NAN])], &["a", "b"])
            .unwrap_err();
        assert!(err.to_string().contains("`b`"));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut g = vec![t(&[0.3, 0.4])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 0.5).abs() < 1e-12);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_single_vector() {
        let mut g = vec![t(&[3.0, 4.0])];
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_uses_global_norm() {
        // norms 3 and 4 -> global 5
        let mut g = vec![t(&[3.0, 0.0]), t(&[0.0, 4.0])];
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 3.0 / 5.0).abs() < 1e-12);
        assert!((g[1].data()[1] - 4.0 / 5.0).abs() < 1e-12);
    }
}
