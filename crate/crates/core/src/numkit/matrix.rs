//! Dense row-major matrices in double precision.
//!
//! This is deliberately small: storage, products, norms, and the handful of
//! elementwise helpers the adapter stack needs. No BLAS, no views, no
//! broadcasting. Vectors are n x 1 matrices.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// n x 1 column vector.
    pub fn column_vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        Matrix {
            rows,
            cols: 1,
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Standard product `self * other` with f64 accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.dim_mismatch("matmul", other));
        }
        let (m, n, p) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, p);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * p..(i + 1) * p];
            for (k, &aik) in a_row.iter().enumerate().take(n) {
                let b_row = &other.data[k * p..(k + 1) * p];
                for j in 0..p {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn transpose_mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(self.dim_mismatch("transpose_mul", other));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, p);
        for k in 0..n {
            let a_row = self.row(k);
            let b_row = &other.data[k * p..(k + 1) * p];
            for (i, &aki) in a_row.iter().enumerate().take(m) {
                let out_row = &mut out.data[i * p..(i + 1) * p];
                for j in 0..p {
                    out_row[j] += aki * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn mul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(self.dim_mismatch("mul_transpose", other));
        }
        let (m, n, p) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, p);
        for i in 0..m {
            let a_row = self.row(i);
            for j in 0..p {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for k in 0..n {
                    acc += a_row[k] * b_row[k];
                }
                out.data[i * p + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    /// `self += s * other`, used by the optimizers.
    pub fn add_scaled_in_place(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.dim_mismatch("add_scaled_in_place", other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Frobenius inner product of two same-shape matrices.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.dim_mismatch("inner", other));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean norm of each column, length `cols`.
    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            for (j, &v) in row.iter().enumerate() {
                sq[j] += v * v;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.dim_mismatch(op, other));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    fn dim_mismatch(&self, op: &'static str, other: &Matrix) -> Error {
        Error::DimMismatch {
            op,
            a_rows: self.rows,
            a_cols: self.cols,
            b_rows: other.rows,
            b_cols: other.cols,
        }
    }
}

/// Rank-1 outer product `u * v^T` of two column vectors.
pub fn outer(u: &Matrix, v: &Matrix) -> Matrix {
    debug_assert_eq!(u.cols(), 1);
    debug_assert_eq!(v.cols(), 1);
    Matrix::from_fn(u.rows(), v.rows(), |i, j| u.data[i] * v.data[j])
}
