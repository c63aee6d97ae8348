//! Dense row-major vectors and matrices with a fixed summation order.
//!
//! Every reduction accumulates in ascending index order, starting from zero,
//! so a matrix product row and the matching matrix-vector product produce
//! bit-identical results. The time-parallel and time-sequential evaluation
//! paths rely on this.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector<T> {
    data: Vec<T>,
}

impl<T: Scalar> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Self::filled(len, T::zero())
    }

    pub fn filled(len: usize, value: T) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> T) -> Self {
        Self {
            data: (0..len).map(f).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T> Vector<T> {
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(data: Vec<T>) -> Self {
        Self { data }
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Matrix::from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Appends one row; used by growing caches.
    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::push_row",
                left: (1, self.cols),
                right: (1, row.len()),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Rows `start..start + count` as a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Self {
        let lo = start * self.cols;
        Self {
            rows: count,
            cols: self.cols,
            data: self.data[lo..lo + count * self.cols].to_vec(),
        }
    }
}

impl<T> Matrix<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        // chunks(0) panics, and a 0-column matrix has no data to chunk anyway.
        let step = self.cols.max(1);
        self.data.chunks(step).take(self.rows)
    }
}

impl<T: Copy> Matrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.cols + j] = value;
    }
}

// ---------------------------------------------------------------------------
// Instrumentation and threading

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Counter of multiply-add work done by the product kernels on this thread,
/// two flops per multiply-accumulate.
pub mod flops {
    use super::FLOPS;

    pub fn reset() {
        FLOPS.with(|c| c.set(0));
    }

    pub fn count() -> u64 {
        FLOPS.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        FLOPS.with(|c| c.set(c.get().wrapping_add(n)));
    }
}

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Number of worker threads used by the matrix-product kernels. Results do
/// not depend on it: rows are partitioned, never reductions.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Partitions the output rows across worker threads when enabled.
fn for_row_blocks<T: Scalar>(
    out: &mut [T],
    rows: usize,
    cols: usize,
    work: impl Fn(usize, &mut [T]) + Sync,
) {
    let n = threads().min(rows);
    // Small products are not worth a thread spawn.
    if n <= 1 || rows * cols < 4096 {
        work(0, out);
        return;
    }
    let per = rows.div_ceil(n);
    std::thread::scope(|s| {
        for (b, chunk) in out.chunks_mut(per * cols).enumerate() {
            let work = &work;
            s.spawn(move || work(b * per, chunk));
        }
    });
}

// ---------------------------------------------------------------------------
// Products

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    flops::add(2 * (m * k * n) as u64);
    if n == 0 {
        return Ok(out);
    }
    for_row_blocks(&mut out.data, m, n, |first, block| {
        for (r, c_row) in block.chunks_mut(n).enumerate() {
            let a_row = a.row(first + r);
            for p in 0..k {
                axpy(c_row, a_row[p], b.row(p));
            }
        }
    });
    Ok(out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`. This is how a batch of row vectors goes
/// through a weight stored as `out × in`.
pub fn matmul_bt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`; the weight-gradient product.
pub fn matmul_at<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_at",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    flops::add(2 * (m * k * n) as u64);
    if n == 0 {
        return Ok(out);
    }
    for_row_blocks(&mut out.data, m, n, |first, block| {
        for p in 0..k {
            let a_row = a.row(p);
            let b_row = b.row(p);
            for (r, c_row) in block.chunks_mut(n).enumerate() {
                axpy(c_row, a_row[first + r], b_row);
            }
        }
    });
    Ok(out)
}

/// `w · x` for `w: m×k`.
pub fn matvec<T: Scalar>(w: &Matrix<T>, x: &[T]) -> Result<Vector<T>> {
    if w.cols != x.len() {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            left: w.shape(),
            right: (x.len(), 1),
        });
    }
    flops::add(2 * (w.rows * w.cols) as u64);
    Ok(Vector::from_fn(w.rows, |i| dot(w.row(i), x)))
}

/// `xᵀ · m` for `m: k×n`.
pub fn vecmat<T: Scalar>(x: &[T], m: &Matrix<T>) -> Result<Vector<T>> {
    if m.rows != x.len() {
        return Err(Error::ShapeMismatch {
            op: "vecmat",
            left: (1, x.len()),
            right: m.shape(),
        });
    }
    flops::add(2 * (m.rows * m.cols) as u64);
    let mut out = Vector::zeros(m.cols);
    for (p, &xp) in x.iter().enumerate() {
        axpy(&mut out, xp, m.row(p));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layer normalization

/// Statistics kept from a layer-norm forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct LnCache<T> {
    /// Normalized input `(x - mean) / sqrt(var + eps)`, before the affine map.
    pub xhat: Vec<T>,
    pub inv_std: T,
}

/// `(x - mean) / sqrt(popvar + eps) ⊙ gamma + beta`.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Vector<T> {
    layer_norm_cached(x, gamma, beta, eps).0
}

pub fn layer_norm_cached<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vector<T>, LnCache<T>) {
    debug_assert!(x.len() == gamma.len() && x.len() == beta.len());
    let n = T::of(x.len() as f64);
    let mut sum = T::zero();
    for &v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut sq = T::zero();
    for &v in x {
        let c = v - mean;
        sq += c * c;
    }
    let inv_std = T::one() / (sq / n + eps).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let out = Vector::from_fn(x.len(), |i| xhat[i] * gamma[i] + beta[i]);
    (out, LnCache { xhat, inv_std })
}

/// Row-wise layer norm of a `T×d` matrix.
pub fn layer_norm_rows<T: Scalar>(
    x: &Matrix<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Matrix<T>, Vec<LnCache<T>>) {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut caches = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let (y, c) = layer_norm_cached(x.row(t), gamma, beta, eps);
        out.row_mut(t).copy_from_slice(&y);
        caches.push(c);
    }
    (out, caches)
}

/// Backward of one layer-norm row. Accumulates into `dgamma`/`dbeta` and
/// returns the input gradient.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    gamma: &[T],
    cache: &LnCache<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vector<T> {
    let d = dy.len();
    let n = T::of(d as f64);
    let mut mean_g = T::zero();
    let mut mean_gx = T::zero();
    for i in 0..d {
        dgamma[i] += dy[i] * cache.xhat[i];
        dbeta[i] += dy[i];
        let g = dy[i] * gamma[i];
        mean_g += g;
        mean_gx += g * cache.xhat[i];
    }
    mean_g /= n;
    mean_gx /= n;
    Vector::from_fn(d, |i| {
        cache.inv_std * (dy[i] * gamma[i] - mean_g - cache.xhat[i] * mean_gx)
    })
}

// ---------------------------------------------------------------------------
// Elementwise kernels

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    SquaredRelu,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Mul,
    Add,
    Max,
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
pub fn squared_relu<T: Scalar>(x: T) -> T {
    let r = x.max(T::zero());
    r * r
}

impl Unary {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::SquaredRelu => squared_relu(x),
            Unary::Exp => x.exp(),
        }
    }
}

impl Binary {
    #[inline]
    pub fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Mul => a * b,
            Binary::Add => a + b,
            Binary::Max => a.max(b),
        }
    }
}

pub fn unary<T: Scalar>(kind: Unary, x: &[T]) -> Vector<T> {
    x.iter().map(|&v| kind.apply(v)).collect::<Vec<_>>().into()
}

pub fn binary<T: Scalar>(kind: Binary, a: &[T], b: &[T]) -> Result<Vector<T>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "binary",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| kind.apply(x, y))
        .collect::<Vec<_>>()
        .into())
}

pub fn unary_matrix<T: Scalar>(kind: Unary, x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| kind.apply(v))
}

pub fn binary_matrix<T: Scalar>(kind: Binary, a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "binary_matrix",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| kind.apply(x, y))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_zero_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 3, 4);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
        let z = matmul(&Matrix::zeros(2, 3), &b).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 5, 4);
        let b = random(&mut rng, 4, 3);
        assert_eq!(matmul(&a, &b).unwrap(), naive(&a, &b));
        assert_eq!(matmul_bt(&a, &b.transpose()).unwrap(), naive(&a, &b));
        assert_eq!(matmul_at(&a.transpose(), &b).unwrap(), naive(&a, &b));
    }

    #[test]
    fn threaded_products_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 64, 96);
        let b = random(&mut rng, 96, 80);
        let serial = matmul(&a, &b).unwrap();
        let serial_at = matmul_at(&a.transpose(), &b).unwrap();
        set_threads(3);
        let threaded = matmul(&a, &b).unwrap();
        let threaded_at = matmul_at(&a.transpose(), &b).unwrap();
        set_threads(1);
        assert_eq!(serial, threaded);
        assert_eq!(serial_at, threaded_at);
    }

    #[test]
    fn matvec_equals_matmul_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, 7, 5);
        let x = random(&mut rng, 3, 5);
        let batch = matmul_bt(&x, &w).unwrap();
        for t in 0..3 {
            assert_eq!(&*matvec(&w, x.row(t)).unwrap(), batch.row(t));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &a),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
        assert!(matvec(&a, &[1.0, 2.0]).is_err());
        assert!(binary(Binary::Add, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn flop_counter_tracks_product_sizes() {
        flops::reset();
        let _ = matmul(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(3, 4)).unwrap();
        let _ = matvec(&Matrix::<f64>::zeros(5, 6), &[0.0; 6]).unwrap();
        assert_eq!(flops::count(), 2 * 24 + 2 * 30);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        assert_eq!(
            &*layer_norm(&[5.0, 5.0, 5.0], &ones, &zeros, 1e-5),
            &[0.0, 0.0, 0.0]
        );
        let y = layer_norm(&[1.0, 2.0, 3.0], &ones, &zeros, 1e-300);
        let expect = 1.5f64.sqrt();
        assert!((y[0] + expect).abs() < 1e-12 && y[1].abs() < 1e-15 && (y[2] - expect).abs() < 1e-12);
        let beta = [0.5, -1.0, 2.0];
        assert_eq!(&*layer_norm(&[3.0; 3], &ones, &beta, 1e-5), &beta);
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(squared_relu(-3.0f64), 0.0);
        assert_eq!(squared_relu(1.5f64), 2.25);
        let x = [-2.0, 0.0, 0.5, 3.0];
        let e = unary(Unary::Exp, &x);
        for (a, b) in e.iter().zip(x) {
            assert_eq!(*a, f64::exp(b));
        }
        assert_eq!(&*binary(Binary::Max, &[1.0, 5.0], &[2.0, 3.0]).unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let gamma = [1.1, 0.9, -0.4, 2.0];
        let beta = [0.0, 0.1, 0.2, 0.3];
        let w = [0.5, -0.25, 1.5, 1.0];
        let f = |x: &[f64]| dot(&layer_norm(x, &gamma, &beta, 1e-5), &w);
        let (_, cache) = layer_norm_cached(&x, &gamma, &beta, 1e-5);
        let mut dg = [0.0; 4];
        let mut db = [0.0; 4];
        let dx = layer_norm_backward(&w, &gamma, &cache, &mut dg, &mut db);
        for i in 0..4 {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    proptest! {
        #[test]
        fn matmul_is_associative_on_small_integers(
            a in prop::collection::vec(-8i32..8, 6),
            b in prop::collection::vec(-8i32..8, 6),
            c in prop::collection::vec(-8i32..8, 4),
        ) {
            let f = |v: &[i32], r, c| Matrix::from_vec(r, c, v.iter().map(|&x| x as f64).collect()).unwrap();
            let (a, b, c) = (f(&a, 2, 3), f(&b, 3, 2), f(&c, 2, 2));
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn layer_norm_standardizes(x in prop::collection::vec(-50.0f64..50.0, 2..64)) {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assume!(var >= 1e-3);
            let y = layer_norm(&x, &vec![1.0; x.len()], &vec![0.0; x.len()], 1e-12);
            let ym = y.iter().sum::<f64>() / n;
            let yv = y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n;
            prop_assert!(ym.abs() <= 1e-12);
            prop_assert!((yv - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn activation_ranges(x in -30.0f64..30.0) {
            prop_assert!(squared_relu(x) >= 0.0);
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
