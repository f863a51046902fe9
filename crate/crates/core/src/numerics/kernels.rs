//! Raw buffer kernels shared by the forward and backward passes.

use super::Scalar;

/// `c[m, n] += a[m, k] * b[k, n]`
pub(crate) fn matmul_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`
pub(crate) fn matmul_a_bt_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`
pub(crate) fn matmul_at_b_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one row.
pub fn softmax_row<F: Scalar>(x: &[F]) -> Vec<F> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<F: Scalar>(x: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<F: Scalar>(x: &[F]) -> Vec<F> {
    let lse = log_sum_exp(x);
    x.iter().map(|&v| v - lse).collect()
}

pub(crate) fn log_sum_exp<F: Scalar>(x: &[F]) -> F {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU; returns (value, derivative).
#[inline]
pub(crate) fn gelu<F: Scalar>(x: F) -> (F, F) {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let one = F::one();
    let x3 = x * x * x;
    let inner = c * (x + a * x3);
    let th = inner.tanh();
    let y = half * x * (one + th);
    let dinner = c * (one + F::lit(3.0) * a * x * x);
    let dy = half * (one + th) + half * x * (one - th * th) * dinner;
    (y, dy)
}

#[inline]
pub(crate) fn silu<F: Scalar>(x: F) -> (F, F) {
    let s = F::one() / (F::one() + (-x).exp());
    (x * s, s * (F::one() + x * (F::one() - s)))
}
