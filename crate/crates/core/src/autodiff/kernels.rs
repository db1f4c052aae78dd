//! Dense kernels behind the tape operations.

use super::tensor::{Real, Tensor};
use crate::par;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus<T: Real>(x: T, beta: T) -> T {
    let z = beta * x;
    if z > T::of(20.0) {
        x
    } else {
        z.exp().ln_1p() / beta
    }
}

pub fn map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T + Sync + Send) -> Tensor<T> {
    let src = a.data();
    let mut out = Tensor::zeros(a.rows(), a.cols());
    let chunk = par::ROW_CHUNK * 16;
    par::for_each_chunk_mut(out.data_mut(), chunk, |i, dst| {
        let s = &src[i * chunk..i * chunk + dst.len()];
        for (d, &v) in dst.iter_mut().zip(s) {
            *d = f(v);
        }
    });
    out
}

pub fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T + Sync + Send) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "zip shape mismatch");
    let (x, y) = (a.data(), b.data());
    let mut out = Tensor::zeros(a.rows(), a.cols());
    let chunk = par::ROW_CHUNK * 16;
    par::for_each_chunk_mut(out.data_mut(), chunk, |i, dst| {
        let o = i * chunk;
        for (k, d) in dst.iter_mut().enumerate() {
            *d = f(x[o + k], y[o + k]);
        }
    });
    out
}

pub fn broadcast_row<T: Real>(a: &Tensor<T>, row: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let r = row.data();
    let mut out = a.clone();
    for i in 0..a.rows() {
        for (o, &q) in out.row_mut(i).iter_mut().zip(r) {
            *o = f(*o, q);
        }
    }
    out
}

pub fn broadcast_col<T: Real>(a: &Tensor<T>, col: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let q = col.data()[i];
        for o in out.row_mut(i) {
            *o = f(*o, q);
        }
    }
    out
}

/// `[r × c] → [1 × c]`.
pub fn col_sums<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let cols = a.cols();
    let partials = par::map_ranges(a.rows(), par::ROW_CHUNK * 4, |range| {
        let mut acc = vec![T::zero(); cols];
        for r in range {
            for (s, &v) in acc.iter_mut().zip(a.row(r)) {
                *s += v;
            }
        }
        acc
    });
    let mut out = Tensor::zeros(1, cols);
    for p in partials {
        for (o, v) in out.data_mut().iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// `[r × c] → [r × 1]`.
pub fn row_sums<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(a.rows(), 1, (0..a.rows()).map(|r| a.row(r).iter().copied().sum()).collect())
}

pub fn sum<T: Real>(a: &Tensor<T>) -> T {
    let data = a.data();
    par::map_ranges(data.len(), par::ROW_CHUNK * 16, |r| data[r].iter().copied().sum::<T>())
        .into_iter()
        .sum()
}

/// `a[r × k] · b[k × n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (rows, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = Tensor::zeros(rows, n);
    if n == 0 {
        return out;
    }
    let (ad, bd) = (a.data(), b.data());
    par::for_each_chunk_mut(out.data_mut(), par::ROW_CHUNK * n, |ci, dst| {
        let r0 = ci * par::ROW_CHUNK;
        let m = dst.len() / n;
        let asub = &ad[r0 * k..(r0 + m) * k];
        T::gemm((m, k, n), (asub, k as isize, 1), (bd, n as isize, 1), T::zero(), (dst, n as isize, 1));
    });
    out
}

/// `a[r × n] · b[k × n]ᵀ → [r × k]`.
pub fn matmul_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (rows, n) = a.shape();
    let k = b.rows();
    debug_assert_eq!(n, b.cols());
    let mut out = Tensor::zeros(rows, k);
    if k == 0 {
        return out;
    }
    let (ad, bd) = (a.data(), b.data());
    par::for_each_chunk_mut(out.data_mut(), par::ROW_CHUNK * k, |ci, dst| {
        let r0 = ci * par::ROW_CHUNK;
        let m = dst.len() / k;
        let asub = &ad[r0 * n..(r0 + m) * n];
        T::gemm((m, n, k), (asub, n as isize, 1), (bd, 1, n as isize), T::zero(), (dst, k as isize, 1));
    });
    out
}

/// `a[r × k]ᵀ · b[r × n] → [k × n]`, reduced over fixed row chunks in order.
pub fn matmul_at<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (rows, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(rows, b.rows());
    let (ad, bd) = (a.data(), b.data());
    let partials = par::map_ranges(rows, par::ROW_CHUNK * 16, |range| {
        let mut acc = vec![T::zero(); k * n];
        let len = range.len();
        let asub = &ad[range.start * k..range.end * k];
        let bsub = &bd[range.start * n..range.end * n];
        T::gemm((k, len, n), (asub, 1, k as isize), (bsub, n as isize, 1), T::zero(), (&mut acc, n as isize, 1));
        acc
    });
    let mut out = Tensor::zeros(k, n);
    for p in partials {
        for (o, v) in out.data_mut().iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}
