//! Raw slice math shared by the value-level tensor ops and the tape.
//!
//! All matrices are row-major. Loops are in i-k-j order so the inner loop
//! streams both operands.

use crate::scalar::Scalar;

/// c[m×n] += a[m×k] · b[k×n]
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// c[k×n] += aᵀ · b where a is [m×k], b is [m×n]
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// c[m×k] += a · bᵀ where a is [m×n], b is [k×n]
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut dot = S::zero();
            for j in 0..n {
                dot += arow[j] * brow[j];
            }
            c[i * k + p] += dot;
        }
    }
}

/// out[c×r] = xᵀ for x[r×c]
pub fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Row-stabilized softmax applied to each row of x[rows×cols].
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for j in 0..cols {
            let e = (row[j] - max).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] = out[r * cols + j] / sum;
        }
    }
    out
}

/// log(Σ exp(row)) with max subtraction.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn frobenius_sq<S: Scalar>(x: &[S]) -> S {
    x.iter().map(|&v| v * v).sum()
}

/// GELU, tanh approximation. Smooth, so finite differences stay well-behaved.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
