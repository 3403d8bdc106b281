//! Row-major dense `f64` matrices.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::NumError;

/// A dense row-major matrix of 64-bit floats.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.values.len() <= 64 {
            write!(f, " {:?}", self.values)?;
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NumError> {
        if values.len() != rows * cols {
            return Err(NumError::Shape {
                op: "from_vec",
                detail: format!("{} values for a {rows}x{cols} matrix", values.len()),
            });
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumError::Shape {
                    op: "from_rows",
                    detail: format!("row {i} has {} entries, expected {cols}", r.len()),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            values: vec![value],
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
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a 1x1 matrix.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            values,
        }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Self) -> Result<Self, NumError> {
        if self.rows != other.rows {
            return Err(NumError::Shape {
                op: "hstack",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        let cols = self.cols + other.cols;
        let mut values = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            values.extend_from_slice(self.row(i));
            values.extend_from_slice(other.row(i));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            values,
        })
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn vstack(parts: &[&Self]) -> Result<Self, NumError> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut values = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(NumError::Shape {
                    op: "vstack",
                    detail: format!("column counts {} vs {cols}", m.cols),
                });
            }
            values.extend_from_slice(&m.values);
            rows += m.rows;
        }
        Ok(Self { rows, cols, values })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale_inplace(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest entry in each row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumError> {
        if self.cols != other.rows {
            return Err(NumError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.values[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.values[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            values: out,
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self, NumError> {
        if self.cols != other.cols {
            return Err(NumError::Shape {
                op: "matmul_t",
                detail: format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            });
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = self.row(i);
            for j in 0..m {
                let b_row = other.row(j);
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Self {
            rows: n,
            cols: m,
            values: out,
        })
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self, NumError> {
        if self.rows != other.rows {
            return Err(NumError::Shape {
                op: "t_matmul",
                detail: format!("{:?}ᵀ x {:?}", self.shape(), other.shape()),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * m];
        for r in 0..n {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: k,
            cols: m,
            values: out,
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    /// Row-wise log-softmax (`x - logsumexp(x)`).
    pub fn row_log_softmax(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }
}
