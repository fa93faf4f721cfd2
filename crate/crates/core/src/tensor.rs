//! Dense row-major `f64` matrices and the handful of kernels the network needs.
//!
//! Row-parallel kernels are compiled in with the `parallel` feature. Each output
//! row is computed by exactly the same instruction sequence in both paths, so
//! results are bitwise identical with and without rayon.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, self.data.clone())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_inner("matmul", self.cols, other.rows)?;
        Ok(dispatch(self.rows, other.cols, self.cols, |out| {
            matmul_rows(self, other, out)
        }))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        check_inner("matmul_nt", self.cols, other.cols)?;
        Ok(dispatch(self.rows, other.rows, self.cols, |out| {
            matmul_nt_rows(self, other, out)
        }))
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        check_inner("matmul_tn", self.rows, other.rows)?;
        let lhs = self.transpose();
        Ok(dispatch(lhs.rows, other.cols, lhs.cols, |out| {
            matmul_rows(&lhs, other, out)
        }))
    }

    /// Sequential product; always available, used by the benchmarks as the baseline.
    pub fn matmul_seq(&self, other: &Self) -> Result<Self> {
        check_inner("matmul", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for (r, row) in out.data.chunks_mut(other.cols.max(1)).enumerate() {
            matmul_rows(self, other, (r, row));
        }
        Ok(out)
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_par(&self, other: &Self) -> Result<Self> {
        use rayon::prelude::*;
        check_inner("matmul", self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        out.data
            .par_chunks_mut(other.cols.max(1))
            .enumerate()
            .for_each(|(r, row)| matmul_rows(self, other, (r, row)));
        Ok(out)
    }
}

fn check_inner(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("inner dimensions {a} vs {b}")));
    }
    Ok(())
}

fn matmul_rows(a: &Matrix, b: &Matrix, (r, out): (usize, &mut [f64])) {
    let arow = a.row(r);
    for (k, &av) in arow.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let brow = b.row(k);
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

fn matmul_nt_rows(a: &Matrix, b: &Matrix, (r, out): (usize, &mut [f64])) {
    let arow = a.row(r);
    for (j, o) in out.iter_mut().enumerate() {
        *o = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
    }
}

fn dispatch(
    rows: usize,
    cols: usize,
    inner: usize,
    kernel: impl Fn((usize, &mut [f64])) + Sync + Send,
) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    if cols == 0 {
        return out;
    }
    #[cfg(feature = "parallel")]
    {
        if rows * cols * inner >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
            use rayon::prelude::*;
            out.data
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(r, row)| kernel((r, row)));
            return out;
        }
    }
    let _ = inner;
    for (r, row) in out.data.chunks_mut(cols).enumerate() {
        kernel((r, row));
    }
    out
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}
