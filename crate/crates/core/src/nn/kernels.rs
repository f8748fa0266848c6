// SPDX-License-Identifier: MIT OR Apache-2.0

//! Slice-level numeric kernels. Every loop has a fixed accumulation order so
//! results are bit-reproducible for a given input.

use super::Scalar;

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight interleaved partial sums.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { gemm_nn_avx2(c, a, b, m, k, n) };
    }
    gemm_nn_body(c, a, b, m, k, n)
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, via a transposed copy of `b`.
pub fn gemm_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(c, a, &bt, m, k, n)
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { gemm_tn_avx2(c, a, b, m, k, n) };
    }
    gemm_tn_body(c, a, b, m, k, n)
}

// The AVX2 variants compile the same bodies with wider vectors. No FMA is
// enabled, so both paths round identically.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nn_avx2<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    gemm_nn_body(c, a, b, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_tn_avx2<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    gemm_tn_body(c, a, b, m, k, n)
}

const MR: usize = 4;
const NR: usize = 8;

/// Shared body of `gemm_nn` (`TRANS_A = false`, `a` is `m×k`) and `gemm_tn`
/// (`TRANS_A = true`, `a` is `k×m`). Every `c[i][j]` accumulates its `k`
/// products in ascending `p` order, whatever the blocking.
#[inline(always)]
fn gemm_body<T: Scalar, const TRANS_A: bool>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let a_at = |i: usize, p: usize| if TRANS_A { a[p * m + i] } else { a[i * k + p] };
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[T::ZERO; NR]; MR];
            for (r, acc_r) in acc.iter_mut().enumerate() {
                acc_r.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR lanes");
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a_at(i0 + r, p);
                    for l in 0..NR {
                        acc_r[l] += av * bp[l];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_r);
            }
        }
        for r in 0..MR {
            let i = i0 + r;
            for j in full_cols..n {
                let mut v = c[i * n + j];
                for p in 0..k {
                    v += a_at(i, p) * b[p * n + j];
                }
                c[i * n + j] = v;
            }
        }
    }
    for i in full_rows..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a_at(i, p);
            for (cv, &bv) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

#[inline(always)]
fn gemm_nn_body<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    gemm_body::<T, false>(c, a, b, m, k, n)
}

#[inline(always)]
fn gemm_tn_body<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    gemm_body::<T, true>(c, a, b, m, k, n)
}

/// GELU with the exact erf form.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    (half * x * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())).flush()
}

/// d/dx of the exact GELU: Φ(x) + x·φ(x).
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2)
        * (-(half * x * x)).exp();
    (cdf + x * pdf).flush()
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v = (*v * inv).flush();
    }
}
