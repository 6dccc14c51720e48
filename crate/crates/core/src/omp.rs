//! Orthogonal Matching Pursuit.
//!
//! Produces exactly-`s`-sparse coefficient rows against a fixed dictionary
//! whose rows are the atoms. Atom selection compares correlations against
//! ℓ₂-normalized atoms; stored coefficients are expressed against the atoms as
//! given. Ties go to the lowest atom index.
//!
//! The per-row solver is the Gram-matrix formulation: `α = D·t` is computed
//! once, residual correlations are updated as `α − G[:, I]·x_I`, and the
//! least-squares refit on the support `I` is a growing Cholesky factor of
//! `G[I, I]`. If a newly selected atom is numerically dependent on the
//! support the row switches to a minimum-norm least-squares refit and is
//! flagged in [`OmpDiagnostics`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};

/// Relative pivot threshold below which a new atom counts as dependent.
pub const RANK_TOL: f64 = 1e-12;

/// One row of a sparse coefficient matrix: `s` distinct atom indices in
/// ascending order with aligned values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// `Σ values[t] · dictionary[indices[t]]`, accumulated in index order.
    pub fn combine(&self, dictionary: &DenseMatrix) -> Vec<f64> {
        let mut out = vec![0.0; dictionary.cols()];
        for (&j, &v) in self.indices.iter().zip(&self.values) {
            for (o, &d) in out.iter_mut().zip(dictionary.row(j as usize)) {
                *o += v * d;
            }
        }
        out
    }
}

/// `m × k` coefficient matrix with exactly `s` stored entries per row.
///
/// Stored as two flat row-major arrays of length `m·s` (indices ascending
/// within each row), the same layout the kernel consumes and the DSF file
/// stores.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCoefficients {
    m: usize,
    k: usize,
    s: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseCoefficients {
    pub fn new(m: usize, k: usize, s: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if m == 0 || k == 0 || s == 0 || s > k {
            return Err(Error::InvalidArgument(format!(
                "sparse coefficients need m, k, s > 0 and s <= k (m={m}, k={k}, s={s})"
            )));
        }
        if indices.len() != m * s || values.len() != m * s {
            return Err(Error::Dimension(format!(
                "expected {} indices and values, got {} and {}",
                m * s,
                indices.len(),
                values.len()
            )));
        }
        for (r, row) in indices.chunks_exact(s).enumerate() {
            if row.iter().any(|&i| i as usize >= k) {
                return Err(Error::InvalidArgument(format!(
                    "row {r}: atom index out of range [0, {k})"
                )));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "row {r}: indices must be strictly increasing"
                )));
            }
        }
        Ok(Self {
            m,
            k,
            s,
            indices,
            values,
        })
    }

    pub fn from_rows(k: usize, s: usize, rows: Vec<SparseRow>) -> Result<Self> {
        let m = rows.len();
        let mut indices = Vec::with_capacity(m * s);
        let mut values = Vec::with_capacity(m * s);
        for r in rows {
            if r.nnz() != s {
                return Err(Error::Dimension(format!(
                    "row has {} entries, expected {s}",
                    r.nnz()
                )));
            }
            indices.extend(r.indices);
            values.extend(r.values);
        }
        Self::new(m, k, s, indices, values)
    }

    /// All-zero coefficients on the `s` lowest atoms of every row.
    pub fn zeros(m: usize, k: usize, s: usize) -> Result<Self> {
        let indices = (0..m).flat_map(|_| 0..s as u32).collect();
        Self::new(m, k, s, indices, vec![0.0; m * s])
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn row_indices(&self, j: usize) -> &[u32] {
        &self.indices[j * self.s..(j + 1) * self.s]
    }

    #[inline]
    pub fn row_values(&self, j: usize) -> &[f64] {
        &self.values[j * self.s..(j + 1) * self.s]
    }

    pub fn row(&self, j: usize) -> SparseRow {
        SparseRow {
            indices: self.row_indices(j).to_vec(),
            values: self.row_values(j).to_vec(),
        }
    }

    /// Replaces row `j` (must carry exactly `s` sorted entries).
    pub fn set_row(&mut self, j: usize, row: &SparseRow) {
        assert_eq!(row.nnz(), self.s);
        let s = self.s;
        self.indices[j * s..(j + 1) * s].copy_from_slice(&row.indices);
        self.values[j * s..(j + 1) * s].copy_from_slice(&row.values);
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.m, self.k);
        for j in 0..self.m {
            for (&i, &v) in self.row_indices(j).iter().zip(self.row_values(j)) {
                out.set(j, i as usize, v);
            }
        }
        out
    }

    /// `S · D` for a `k × b` dictionary.
    pub fn apply(&self, dictionary: &DenseMatrix) -> Result<DenseMatrix> {
        if dictionary.rows() != self.k {
            return Err(Error::Dimension(format!(
                "coefficients have k={}, dictionary has {} rows",
                self.k,
                dictionary.rows()
            )));
        }
        let b = dictionary.cols();
        let mut data = Vec::with_capacity(self.m * b);
        for j in 0..self.m {
            data.extend(self.row(j).combine(dictionary));
        }
        DenseMatrix::new(self.m, b, data)
    }

    /// Rows whose support contains `atom`, in ascending order, with the
    /// position of the atom inside each row.
    pub fn rows_using(&self, atom: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 0..self.m {
            if let Ok(pos) = self.row_indices(j).binary_search(&atom) {
                out.push((j, pos));
            }
        }
        out
    }

    /// Support pattern equality, ignoring values.
    pub fn same_pattern(&self, other: &Self) -> bool {
        self.m == other.m && self.k == other.k && self.s == other.s && self.indices == other.indices
    }
}

/// Per-row solver trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OmpDiagnostics {
    /// Atoms in the order they were selected.
    pub selection_order: Vec<u32>,
    /// Residual norm before any selection and after each refit.
    pub residual_norms: Vec<f64>,
    /// A selected support was numerically rank deficient and the row was
    /// refit by minimum-norm least squares.
    pub rank_deficient: bool,
}

/// Dictionary with the Gram matrix and atom norms precomputed, reusable for
/// many targets.
pub struct OmpEncoder<'a> {
    dictionary: &'a DenseMatrix,
    gram: Vec<f64>,
    norms: Vec<f64>,
    s: usize,
}

impl<'a> OmpEncoder<'a> {
    pub fn new(dictionary: &'a DenseMatrix, s: usize) -> Result<Self> {
        let (k, b) = dictionary.shape();
        if s == 0 {
            return Err(Error::InvalidArgument("sparsity s must be at least 1".into()));
        }
        if s > k {
            return Err(Error::InvalidArgument(format!(
                "sparsity s={s} exceeds dictionary size k={k}"
            )));
        }
        if s > b {
            return Err(Error::InvalidArgument(format!(
                "sparsity s={s} exceeds atom length b={b}"
            )));
        }
        let norms: Vec<f64> = (0..k)
            .map(|i| dot(dictionary.row(i), dictionary.row(i)).sqrt())
            .collect();
        if norms.iter().all(|&n| n == 0.0) {
            return Err(Error::InvalidArgument("dictionary has only zero atoms".into()));
        }
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let g = dot(dictionary.row(i), dictionary.row(j));
                gram[i * k + j] = g;
                gram[j * k + i] = g;
            }
        }
        Ok(Self {
            dictionary,
            gram,
            norms,
            s,
        })
    }

    pub fn sparsity(&self) -> usize {
        self.s
    }

    pub fn encode(&self, target: &[f64]) -> Result<SparseRow> {
        self.encode_with_diagnostics(target).map(|(row, _)| row)
    }

    pub fn encode_with_diagnostics(&self, target: &[f64]) -> Result<(SparseRow, OmpDiagnostics)> {
        let d = self.dictionary;
        let (k, b) = d.shape();
        if target.len() != b {
            return Err(Error::Dimension(format!(
                "target has length {}, atoms have length {b}",
                target.len()
            )));
        }
        let alpha: Vec<f64> = (0..k).map(|i| dot(d.row(i), target)).collect();
        let target_sq = dot(target, target);

        let mut diag = OmpDiagnostics {
            residual_norms: vec![target_sq.sqrt()],
            ..Default::default()
        };
        let mut support: Vec<usize> = Vec::with_capacity(self.s);
        let mut selected = vec![false; k];
        // Lower-triangular Cholesky factor of G[I, I], row-major s×s.
        let mut chol = vec![0.0; self.s * self.s];
        let mut coeffs: Vec<f64> = Vec::new();
        let mut corr = alpha.clone();

        for step in 0..self.s {
            let pick = self.select(&corr, &selected);
            selected[pick] = true;
            support.push(pick);
            diag.selection_order.push(pick as u32);

            if !diag.rank_deficient && !self.extend_cholesky(&mut chol, &support) {
                diag.rank_deficient = true;
            }
            coeffs = if diag.rank_deficient {
                min_norm_fit(d, &support, target)
            } else {
                let rhs: Vec<f64> = support.iter().map(|&i| alpha[i]).collect();
                cholesky_solve(&chol, self.s, step + 1, &rhs)
            };

            // residual correlations c = α − G[:, I]·x
            if diag.rank_deficient {
                let r = residual(d, &support, &coeffs, target);
                for (i, c) in corr.iter_mut().enumerate() {
                    *c = dot(d.row(i), &r);
                }
                diag.residual_norms.push(dot(&r, &r).sqrt());
            } else {
                for (i, c) in corr.iter_mut().enumerate() {
                    let g = &self.gram[i * k..(i + 1) * k];
                    *c = alpha[i]
                        - support
                            .iter()
                            .zip(&coeffs)
                            .map(|(&j, &x)| g[j] * x)
                            .sum::<f64>();
                }
                // ‖r‖² = ‖t‖² − x·α_I
                let explained: f64 = support.iter().zip(&coeffs).map(|(&j, &x)| x * alpha[j]).sum();
                diag.residual_norms.push((target_sq - explained).max(0.0).sqrt());
            }
        }

        let mut pairs: Vec<(u32, f64)> = support
            .iter()
            .zip(&coeffs)
            .map(|(&i, &v)| (i as u32, v))
            .collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let row = SparseRow {
            indices: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        };
        Ok((row, diag))
    }

    /// Unselected atom with the largest normalized |correlation|; lowest
    /// index wins ties. Zero atoms are only taken when nothing else is left.
    fn select(&self, corr: &[f64], selected: &[bool]) -> usize {
        let mut best: Option<(usize, f64)> = None;
        for (i, (&c, &n)) in corr.iter().zip(&self.norms).enumerate() {
            if selected[i] || n == 0.0 {
                continue;
            }
            let score = (c / n).abs();
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((i, score)),
            }
        }
        best.map(|b| b.0)
            .unwrap_or_else(|| selected.iter().position(|&s| !s).expect("s <= k"))
    }

    /// Appends the last support atom to the Cholesky factor. Returns false if
    /// the new pivot is numerically zero.
    fn extend_cholesky(&self, chol: &mut [f64], support: &[usize]) -> bool {
        let k = self.norms.len();
        let n = support.len();
        let ld = self.s;
        let new = support[n - 1];
        let g_new = self.gram[new * k + new];
        // solve L w = G[I_old, new]
        let mut w = vec![0.0; n - 1];
        for i in 0..n - 1 {
            let mut v = self.gram[support[i] * k + new];
            for (j, wj) in w.iter().enumerate().take(i) {
                v -= chol[i * ld + j] * wj;
            }
            w[i] = v / chol[i * ld + i];
        }
        let pivot = g_new - dot(&w, &w);
        if !(pivot > RANK_TOL * g_new.max(f64::MIN_POSITIVE)) {
            return false;
        }
        for (j, wj) in w.iter().enumerate() {
            chol[(n - 1) * ld + j] = *wj;
        }
        chol[(n - 1) * ld + n - 1] = pivot.sqrt();
        true
    }
}

fn cholesky_solve(chol: &[f64], ld: usize, n: usize, rhs: &[f64]) -> Vec<f64> {
    // L y = rhs
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = rhs[i];
        for j in 0..i {
            v -= chol[i * ld + j] * y[j];
        }
        y[i] = v / chol[i * ld + i];
    }
    // Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for j in i + 1..n {
            v -= chol[j * ld + i] * x[j];
        }
        x[i] = v / chol[i * ld + i];
    }
    x
}

/// Minimum-norm least-squares coefficients on `support`.
fn min_norm_fit(d: &DenseMatrix, support: &[usize], target: &[f64]) -> Vec<f64> {
    let b = d.cols();
    let a = DMatrix::from_fn(b, support.len(), |r, c| d.get(support[c], r));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (RANK_TOL * smax).max(f64::MIN_POSITIVE);
    let t = DVector::from_column_slice(target);
    match svd.solve(&t, eps) {
        Ok(x) => x.iter().copied().collect(),
        Err(_) => vec![0.0; support.len()],
    }
}

fn residual(d: &DenseMatrix, support: &[usize], coeffs: &[f64], target: &[f64]) -> Vec<f64> {
    let mut r = target.to_vec();
    for (&i, &x) in support.iter().zip(coeffs) {
        for (ri, &a) in r.iter_mut().zip(d.row(i)) {
            *ri -= x * a;
        }
    }
    r
}

pub fn omp_encode_row(target: &[f64], dictionary: &DenseMatrix, s: usize) -> Result<SparseRow> {
    OmpEncoder::new(dictionary, s)?.encode(target)
}

/// Encodes every row of `targets` independently (in parallel).
pub fn omp_encode_block(
    targets: &DenseMatrix,
    dictionary: &DenseMatrix,
    s: usize,
) -> Result<SparseCoefficients> {
    let encoder = OmpEncoder::new(dictionary, s)?;
    encode_rows(&encoder, targets)
}

pub(crate) fn encode_rows(encoder: &OmpEncoder<'_>, targets: &DenseMatrix) -> Result<SparseCoefficients> {
    let results: Vec<Result<(SparseRow, OmpDiagnostics)>> = (0..targets.rows())
        .into_par_iter()
        .map(|j| encoder.encode_with_diagnostics(targets.row(j)))
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut deficient = 0usize;
    for r in results {
        let (row, diag) = r?;
        deficient += diag.rank_deficient as usize;
        rows.push(row);
    }
    if deficient > 0 {
        log::debug!("omp: {deficient} rows fell back to minimum-norm least squares");
    }
    SparseCoefficients::from_rows(encoder.dictionary.rows(), encoder.s, rows)
}
