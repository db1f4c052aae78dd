use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable on a [`Tape`](super::Tape).
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c ← a · b + beta · c` for an `m × k` by `k × n` product; `(rs, cs)`
    /// are row and column strides in elements.
    fn gemm(dims: (usize, usize, usize), a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: (&mut [Self], isize, isize));
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
    }
}

const SMALL_K: usize = 64;

/// Row-by-row dot products for `a · bᵀ` with short rows (the input
/// gradients of small MLP layers), where packing operands costs more than
/// the library kernel saves. `a`, `bᵀ` and `c` have unit column stride.
/// Both paths multiply then add in the same order, so results do not depend
/// on the instruction set.
fn small_gemm<T: Real>(dims: (usize, usize, usize), a: (&[T], isize, isize), b: (&[T], isize, isize), beta: T, c: (&mut [T], isize)) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled features.
        unsafe { small_gemm_avx2(dims, a, b, beta, c) };
        return;
    }
    small_gemm_body(dims, a, b, beta, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn small_gemm_avx2<T: Real>(dims: (usize, usize, usize), a: (&[T], isize, isize), b: (&[T], isize, isize), beta: T, c: (&mut [T], isize)) {
    small_gemm_body(dims, a, b, beta, c);
}

const LANES: usize = 8;

#[inline(always)]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (xc, yc) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    for (l, (&xv, &yv)) in xr.iter().zip(yr).enumerate() {
        acc[l] += xv * yv;
    }
    let half = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (half[0] + half[2]) + (half[1] + half[3])
}

#[inline(always)]
fn small_gemm_body<T: Real>(
    (m, k, n): (usize, usize, usize),
    (ad, ars, acs): (&[T], isize, isize),
    (bd, brs, bcs): (&[T], isize, isize),
    beta: T,
    (cd, crs): (&mut [T], isize),
) {
    debug_assert!(acs == 1 && brs == 1);
    let (ars, bcs, crs) = (ars as usize, bcs as usize, crs as usize);
    let bt: Vec<T>;
    let bt: &[T] = if bcs == k {
        &bd[..k * n]
    } else {
        bt = (0..n).flat_map(|j| (0..k).map(move |p| bd[j * bcs + p])).collect();
        &bt
    };
    for i in 0..m {
        let arow = &ad[i * ars..i * ars + k];
        let row = &mut cd[i * crs..i * crs + n];
        for (j, cv) in row.iter_mut().enumerate() {
            let v = dot(arow, &bt[j * k..(j + 1) * k]);
            *cv = if beta == T::zero() { v } else { v + beta * *cv };
        }
    }
}

macro_rules! real_impl {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                (m, k, n): (usize, usize, usize),
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                assert!(span(m, k, a.1, a.2) <= a.0.len(), "gemm: a out of range");
                assert!(span(k, n, b.1, b.2) <= b.0.len(), "gemm: b out of range");
                assert!(span(m, n, c.1, c.2) <= c.0.len(), "gemm: c out of range");
                if m == 0 || n == 0 {
                    return;
                }
                if c.2 == 1 && a.2 == 1 && b.1 == 1 && k <= SMALL_K {
                    small_gemm((m, k, n), a, b, beta, (c.0, c.1));
                    return;
                }
                // SAFETY: every strided access stays within the slices checked above,
                // and `c` is exclusively borrowed.
                unsafe {
                    $kernel(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.0.as_mut_ptr(), c.1, c.2);
                }
            }
        }
    };
}

real_impl!(f32, matrixmultiply::sgemm);
real_impl!(f64, matrixmultiply::dgemm);

/// Dense row-major 2-D array. Batches of points are `[points × channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::filled(1, 1, value)
    }

    /// Wraps `data` as a `rows × cols` tensor. Panics if the length disagrees.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// The single element of a `1 × 1` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: T) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}
