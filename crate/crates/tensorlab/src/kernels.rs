//! Raw slice kernels shared by eager tensor methods and the tape.
//!
//! Every reduction accumulates in index order starting from zero, so results
//! are identical to the textbook loop in the same precision.

use crate::Scalar;

const MR: usize = 4;
const NR: usize = 32;

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        row[q] += av * brow[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < n {
            gemm_tail(i, i + MR, j, k, n, a, b, c);
        }
        i += MR;
    }
    if i < m {
        gemm_tail(i, m, 0, k, n, a, b, c);
    }
}

// Rows [r0, r1), columns [c0, n): row-at-a-time accumulation.
#[allow(clippy::too_many_arguments)]
fn gemm_tail<T: Scalar>(
    r0: usize,
    r1: usize,
    c0: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    for i in r0..r1 {
        let out = &mut c[i * n + c0..(i + 1) * n];
        out.fill(T::zero());
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n + c0..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Transposes a row-major `rows×cols` block into `cols×rows`.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for q in 0..inner {
            let at = |i: usize| o * len * inner + i * inner + q;
            let mut max = T::neg_infinity();
            for i in 0..len {
                max = max.max(x[at(i)]);
            }
            let mut total = T::zero();
            for i in 0..len {
                let e = (x[at(i)] - max).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..len {
                out[at(i)] = out[at(i)] / total;
            }
        }
    }
}

/// Zero-mean unit-variance along the axis. Writes `1/sqrt(var + eps)` per lane.
pub fn normalize<T: Scalar>(
    x: &[T],
    out: &mut [T],
    inv_std: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
    eps: T,
) {
    let n = T::from_usize(len).unwrap();
    for o in 0..outer {
        for q in 0..inner {
            let at = |i: usize| o * len * inner + i * inner + q;
            let mut mean = T::zero();
            for i in 0..len {
                mean += x[at(i)];
            }
            mean /= n;
            let mut var = T::zero();
            for i in 0..len {
                let d = x[at(i)] - mean;
                var += d * d;
            }
            var /= n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[o * inner + q] = is;
            for i in 0..len {
                out[at(i)] = (x[at(i)] - mean) * is;
            }
        }
    }
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}
