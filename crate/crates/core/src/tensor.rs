//! Dense row-major matrices over f32/f64.
//!
//! Training runs in f32; gradient checks instantiate the same code in f64
//! because central finite differences are unreliable in single precision.

use crate::error::{Error, Result};
use std::fmt::Debug;

/// Element type for all tensor math. Implemented for `f32` and `f64`.
pub trait Scalar: num_traits::Float + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("matrix dims must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from nested rows; used mostly by tests with hand-set weights.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
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

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_assign(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    /// self += s * other
    pub fn axpy_assign(&mut self, s: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn all_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    /// Exact bit-pattern equality; distinguishes -0.0 from +0.0.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    /// Copies a contiguous column block `[c0, c1)` into a new matrix.
    pub fn col_block(&self, c0: usize, c1: usize) -> Self {
        assert!(c0 < c1 && c1 <= self.cols);
        let mut out = Matrix::zeros(self.rows, c1 - c0);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }

    /// Writes `block` into columns `[c0, c0 + block.cols)`.
    pub fn set_col_block(&mut self, c0: usize, block: &Self) {
        assert_eq!(self.rows, block.rows);
        assert!(c0 + block.cols <= self.cols);
        for r in 0..self.rows {
            self.row_mut(r)[c0..c0 + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// C[m x n] = A[m x k] * B[k x n]
pub fn matmul_nn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols(), b.rows(), "matmul_nn inner dim mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (l, &av) in a_row.iter().enumerate().take(k) {
            if av == T::zero() {
                continue;
            }
            let b_row = b.row(l);
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// C[m x n] = A[m x k] * B[n x k]^T  (both operands scanned along rows)
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols(), b.cols(), "matmul_nt inner dim mismatch");
    let (m, n) = (a.rows(), b.rows());
    let mut c = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (j, cv) in c_row.iter_mut().enumerate().take(n) {
            let b_row = b.row(j);
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = acc;
        }
    }
    c
}

/// C[m x n] = A[k x m]^T * B[k x n]  (accumulated as a sum of outer products)
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.rows(), b.rows(), "matmul_tn inner dim mismatch");
    let (m, n) = (a.cols(), b.cols());
    let mut c = Matrix::zeros(m, n);
    for l in 0..a.rows() {
        let a_row = a.row(l);
        let b_row = b.row(l);
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = c.row_mut(i);
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a23() -> Matrix<f64> {
        Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]])
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = a23();
        let b = Matrix::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]);
        let c = matmul_nn(&a, &b);
        assert_eq!(c.row(0), &[58.0, 64.0]);
        assert_eq!(c.row(1), &[139.0, 154.0]);

        // A * B == A *(B^T)^T  and  A * B == (A^T)^T * B
        let c_nt = matmul_nt(&a, &b.transpose());
        let c_tn = matmul_tn(&a.transpose(), &b);
        assert!(c.bitwise_eq(&c_nt) || c.max_abs_diff(&c_nt) < 1e-12);
        assert!(c.max_abs_diff(&c_tn) < 1e-12);
    }

    #[test]
    fn from_vec_validates_length() {
        assert!(Matrix::<f32>::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::<f32>::from_vec(0, 2, vec![]).is_err());
        assert!(Matrix::<f32>::from_vec(2, 2, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn col_block_round_trip() {
        let a = a23();
        let block = a.col_block(1, 3);
        assert_eq!(block.row(0), &[2.0, 3.0]);
        let mut b = Matrix::zeros(2, 3);
        b.set_col_block(1, &block);
        assert_eq!(b.at(1, 2), 6.0);
        assert_eq!(b.at(1, 0), 0.0);
    }

    #[test]
    fn norms_and_finiteness() {
        let a = Matrix::<f32>::from_rows(&[vec![3.0, 4.0]]);
        assert!((a.l2_norm() - 5.0).abs() < 1e-12);
        assert!(a.all_finite());
        let bad = Matrix::<f32>::from_rows(&[vec![f32::NAN]]);
        assert!(!bad.all_finite());
    }
}
