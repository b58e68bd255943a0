//! Dense row-major matrices with fixed-order reductions.
//!
//! Every reduction walks its index range in ascending order inside a single
//! worker, so results do not depend on how many rayon threads are available.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many output elements matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 14;

pub trait Element: Copy + Default + PartialOrd + Send + Sync + std::fmt::Debug + 'static {
    fn finite(self) -> bool;
}

impl Element for f32 {
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Element for f64 {
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Element for bool {
    fn finite(self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// Panics on a non-finite value.
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        assert!(value.finite(), "non-finite value written into matrix");
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    /// Element-wise map. Fails if `f` produces a non-finite value.
    pub fn try_map<U: Element>(&self, f: impl Fn(T) -> U) -> Result<Matrix<U>> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vstack with differing column counts"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }
}

impl Matrix<f32> {
    /// Uniform entries in `[-bound, bound)`.
    pub fn random_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f32, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix<f32>) -> Result<Matrix<f32>> {
        if self.cols != other.rows {
            return Err(Error::shape(format!("matmul {}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let fill = |i: usize, out: &mut [f32]| {
            let a = self.row(i);
            for (j, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (p, &av) in a.iter().enumerate() {
                    acc += av * other.data[p * m + j];
                }
                *slot = acc;
            }
        };
        let data = self.fill_rows(n, m, k, fill);
        Matrix::new(n, m, data).map_err(|_| Error::NonFinite("matmul"))
    }

    /// `self * other^T`, the natural product for `(out x in)` weight layouts.
    pub fn matmul_transposed(&self, other: &Matrix<f32>) -> Result<Matrix<f32>> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul_transposed {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let fill = |i: usize, out: &mut [f32]| {
            let a = self.row(i);
            for (j, slot) in out.iter_mut().enumerate() {
                let b = other.row(j);
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[p] * b[p];
                }
                *slot = acc;
            }
        };
        let data = self.fill_rows(n, m, k, fill);
        Matrix::new(n, m, data).map_err(|_| Error::NonFinite("matmul_transposed"))
    }

    fn fill_rows(&self, n: usize, m: usize, k: usize, fill: impl Fn(usize, &mut [f32]) + Sync) -> Vec<f32> {
        let mut data = vec![0.0f32; n * m];
        if m == 0 {
            return data;
        }
        if n * m * k.max(1) >= PAR_THRESHOLD {
            data.par_chunks_mut(m).enumerate().for_each(|(i, out)| fill(i, out));
        } else {
            data.chunks_mut(m).enumerate().for_each(|(i, out)| fill(i, out));
        }
        data
    }

    /// Per-column sum of squares, accumulated in f64 in ascending row order.
    pub fn col_sq_norms(&self) -> Result<Vec<f64>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::shape("col_sq_norms of an empty matrix"));
        }
        let mut acc = vec![0.0f64; self.cols];
        accumulate_sq(&mut acc, self);
        Ok(acc)
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v as f64).collect() }
    }
}

/// Adds the per-column squares of `x` onto `acc`, one row at a time.
///
/// Calling this on consecutive row blocks gives the same bits as one call on
/// the stacked matrix.
pub fn accumulate_sq(acc: &mut [f64], x: &Matrix<f32>) {
    debug_assert_eq!(acc.len(), x.cols());
    for i in 0..x.rows() {
        for (a, &v) in acc.iter_mut().zip(x.row(i)) {
            let v = v as f64;
            *a += v * v;
        }
    }
}
