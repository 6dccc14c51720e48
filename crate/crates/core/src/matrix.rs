//! Row-major dense matrix shared by every other module.
//!
//! Values are held at 64-bit precision; files store them as binary32
//! (see [`crate::io`]). Every reduction runs in a fixed order, so results are
//! bitwise reproducible regardless of how many threads rayon uses.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Rows per rayon task in the row-parallel kernels.
const PAR_ROW_CHUNK: usize = 16;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols))
                .finish()?;
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let len = rows.checked_mul(cols).ok_or_else(|| {
            Error::Dimension(format!("{rows}x{cols} overflows the address space"))
        })?;
        if data.len() != len {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// I.i.d. standard normal entries.
    pub fn random_normal(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copy of the column range `cols`.
    pub fn column_block(&self, cols: Range<usize>) -> Self {
        assert!(cols.start < cols.end && cols.end <= self.cols);
        let width = cols.end - cols.start;
        let mut out = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            out.extend_from_slice(&self.row(i)[cols.clone()]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data: out,
        }
    }

    /// Copy of the row range `rows`.
    pub fn row_block(&self, rows: Range<usize>) -> Self {
        assert!(rows.start < rows.end && rows.end <= self.rows);
        Self {
            rows: rows.end - rows.start,
            cols: self.cols,
            data: self.data[rows.start * self.cols..rows.end * self.cols].to_vec(),
        }
    }

    /// Writes `block` into this matrix starting at column `col0`.
    pub fn set_column_block(&mut self, col0: usize, block: &DenseMatrix) {
        assert_eq!(block.rows, self.rows);
        assert!(col0 + block.cols <= self.cols);
        for i in 0..self.rows {
            let c = self.cols;
            self.data[i * c + col0..i * c + col0 + block.cols].copy_from_slice(block.row(i));
        }
    }

    /// Horizontal concatenation `[b0, b1, ...]`.
    pub fn hstack(blocks: &[DenseMatrix]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Dimension("hstack of zero blocks".into()))?;
        if blocks.iter().any(|b| b.rows != first.rows) {
            return Err(Error::Dimension("hstack blocks differ in row count".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Self::zeros(first.rows, cols);
        let mut c0 = 0;
        for b in blocks {
            out.set_column_block(c0, b);
            c0 += b.cols;
        }
        Ok(out)
    }

    /// Vertical concatenation.
    pub fn vstack(blocks: &[DenseMatrix]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Dimension("vstack of zero blocks".into()))?;
        if blocks.iter().any(|b| b.cols != first.cols) {
            return Err(Error::Dimension("vstack blocks differ in column count".into()));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let data = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
        Self::new(rows, first.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every entry through binary32, the precision used on disk.
    pub fn round_to_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// `a · b` with each output element accumulated over ascending inner index.
pub fn matmul_dense(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul: left is {}x{}, right is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = b.cols;
    let mut out = DenseMatrix::zeros(a.rows, n);
    let kernel = |(chunk_idx, chunk): (usize, &mut [f64])| {
        let row0 = chunk_idx * PAR_ROW_CHUNK;
        for (r, out_row) in chunk.chunks_mut(n).enumerate() {
            let a_row = a.row(row0 + r);
            for (kk, &a_ik) in a_row.iter().enumerate() {
                let b_row = b.row(kk);
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b_kj;
                }
            }
        }
    };
    if a.rows * a.cols * n >= 1 << 16 {
        out.data
            .par_chunks_mut(PAR_ROW_CHUNK * n)
            .enumerate()
            .for_each(kernel);
    } else {
        out.data
            .chunks_mut(PAR_ROW_CHUNK * n)
            .enumerate()
            .for_each(kernel);
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "matmul_tn: left is {}x{}, right is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for kk in 0..a.rows {
        let a_row = a.row(kk);
        let b_row = b.row(kk);
        for (i, &a_ki) in a_row.iter().enumerate() {
            let out_row = out.row_mut(i);
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ki * b_kj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::Dimension(format!(
            "matmul_nt: left is {}x{}, right is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(DenseMatrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative Frobenius error `‖w − w_hat‖ / ‖w‖`.
pub fn frobenius_error(w: &DenseMatrix, w_hat: &DenseMatrix) -> Result<f64> {
    let abs = frobenius_distance(w, w_hat)?;
    let norm = w.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Numeric(
            "relative error undefined for a zero-norm reference".into(),
        ));
    }
    Ok(abs / norm)
}

/// Absolute Frobenius distance `‖w − w_hat‖`.
pub fn frobenius_distance(w: &DenseMatrix, w_hat: &DenseMatrix) -> Result<f64> {
    w.check_same_shape(w_hat, "frobenius_error")?;
    Ok(w.data
        .iter()
        .zip(&w_hat.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Random matrix with singular values `σ_i = i^(-decay)`, `i = 1..=min(rows, cols)`.
///
/// Built as `U · diag(σ) · Vᵀ` with `U`, `V` Haar-distributed orthonormal
/// frames (QR of Gaussian matrices with sign correction). `decay = 0` gives a
/// flat spectrum.
pub fn random_heavy_tailed(
    rows: usize,
    cols: usize,
    decay: f64,
    rng: &mut Rng,
) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!(
            "decay must lie in [0, 1], got {decay}"
        )));
    }
    let r = rows.min(cols);
    let u = random_orthonormal_columns(rows, r, rng);
    let v = random_orthonormal_columns(cols, r, rng);
    let sigma: Vec<f64> = (1..=r).map(|i| (i as f64).powf(-decay)).collect();
    // U · diag(σ)
    let mut us = u;
    for i in 0..rows {
        for (x, s) in us.row_mut(i).iter_mut().zip(&sigma) {
            *x *= s;
        }
    }
    matmul_nt(&us, &v)
}

/// `n × r` matrix with Haar-random orthonormal columns.
pub(crate) fn random_orthonormal_columns(n: usize, r: usize, rng: &mut Rng) -> DenseMatrix {
    let g = DenseMatrix::random_normal(n, r, rng).to_nalgebra();
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..r {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    DenseMatrix::from_nalgebra(&q)
}
