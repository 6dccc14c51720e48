//! K-SVD dictionary learning for a single `M × B` block, and the
//! truncated-SVD low-rank baseline it is compared against.

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::omp::{encode_rows, OmpEncoder, SparseCoefficients};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct KsvdConfig {
    pub max_iters: usize,
    /// Stop once `(prev − cur) / prev` falls below this.
    pub rel_tol: f64,
    /// Atoms used by fewer rows than this are reseeded.
    pub atom_replacement_threshold: f64,
    /// Atoms whose absolute cosine with a lower-indexed atom exceeds this are
    /// treated as duplicates; values of 1 or more disable the check.
    pub duplicate_atom_threshold: f64,
    pub rng: Rng,
}

impl Default for KsvdConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-5,
            atom_replacement_threshold: 1.0,
            duplicate_atom_threshold: 0.99,
            rng: Rng::new(0),
        }
    }
}

impl KsvdConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            rng: Rng::new(seed),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be non-negative".into()));
        }
        if !(self.duplicate_atom_threshold > 0.0) {
            return Err(Error::InvalidArgument("duplicate_atom_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Learned `(S, D)` pair for one block.
#[derive(Debug, Clone)]
pub struct BlockFactor {
    pub coeffs: SparseCoefficients,
    pub dictionary: DenseMatrix,
    /// Squared-error objective `‖W − S·D‖²`: entry 0 after the initial sparse
    /// coding, then one entry per completed iteration.
    pub objective_history: Vec<f64>,
}

impl BlockFactor {
    pub fn reconstruct(&self) -> DenseMatrix {
        self.coeffs
            .apply(&self.dictionary)
            .expect("block factor dims are consistent")
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

/// Learns a `k`-atom dictionary and exactly-`s`-sparse codes for `w_block`.
///
/// Each iteration sparse-codes every row with OMP (a row keeps its previous
/// code when OMP does not improve on it) and then sweeps the atoms in index
/// order, replacing each atom and its coefficients with the dominant singular
/// pair of the residual restricted to the rows that use it. Atoms used by
/// fewer than `atom_replacement_threshold` rows are reseeded with the
/// worst-reconstructed rows. When atoms end an iteration as near-duplicates,
/// a trial dictionary with them reseeded is recoded and swept once, and kept
/// only if it lowers the objective.
pub fn ksvd_factor(w_block: &DenseMatrix, k: usize, s: usize, cfg: &KsvdConfig) -> Result<BlockFactor> {
    cfg.validate()?;
    let (m, b) = w_block.shape();
    if s == 0 || s > k || s > b {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= s <= min(k, b), got s={s}, k={k}, b={b}"
        )));
    }
    if k > u16::MAX as usize + 1 {
        return Err(Error::InvalidArgument(format!("k={k} exceeds 65536 atoms")));
    }
    if m < k {
        log::warn!("ksvd: block has {m} rows but k={k} atoms; dictionary is padded with random rows");
    }
    if k <= b {
        log::debug!("ksvd: k={k} <= b={b}, dictionary cannot span the block");
    }

    let mut rng = cfg.rng.clone();
    if w_block.data().iter().all(|&v| v == 0.0) {
        return Ok(BlockFactor {
            coeffs: SparseCoefficients::zeros(m, k, s)?,
            dictionary: random_unit_rows(k, b, &mut rng),
            objective_history: vec![0.0],
        });
    }

    let mut dictionary = initial_dictionary(w_block, k, &mut rng);
    let mut coeffs = encode_rows(&OmpEncoder::new(&dictionary, s)?, w_block)?;
    let mut residual = residual_matrix(w_block, &coeffs, &dictionary);
    let mut history = vec![residual.frobenius_norm().powi(2)];
    // residuals this small are rounding noise; iterating further only shuffles it
    let exact = EXACT_FIT * w_block.frobenius_norm().powi(2);

    for iter in 0..cfg.max_iters {
        if *history.last().unwrap() <= exact {
            break;
        }
        if iter > 0 {
            recode_keep_better(w_block, &dictionary, &mut coeffs, &mut residual, s)?;
        }
        update_atoms(w_block, &mut dictionary, &mut coeffs, &mut residual, cfg, &mut rng);

        // recompute exactly to shed drift from the incremental updates
        residual = residual_matrix(w_block, &coeffs, &dictionary);
        let mut obj = residual.frobenius_norm().powi(2);
        if let Some(trial) = reseed_duplicates(w_block, &dictionary, &residual, s, cfg, &mut rng)? {
            if trial.3 < obj {
                (dictionary, coeffs, residual, obj) = trial;
            }
        }
        let prev = *history.last().unwrap();
        history.push(obj);
        if !obj.is_finite() {
            return Err(Error::Numeric("ksvd objective became non-finite".into()));
        }
        if obj == 0.0 || (prev - obj) < cfg.rel_tol * prev {
            break;
        }
    }

    Ok(BlockFactor {
        coeffs,
        dictionary,
        objective_history: history,
    })
}

type Trial = (DenseMatrix, SparseCoefficients, DenseMatrix, f64);

/// Reseeds near-duplicate atoms, recodes every row from scratch and runs one
/// atom sweep. `None` when no atom is a duplicate.
fn reseed_duplicates(
    w: &DenseMatrix,
    d: &DenseMatrix,
    residual: &DenseMatrix,
    s: usize,
    cfg: &KsvdConfig,
    rng: &mut Rng,
) -> Result<Option<Trial>> {
    let k = d.rows();
    let dups: Vec<usize> = (1..k)
        .filter(|&a| (0..a).any(|b| dot(d.row(a), d.row(b)).abs() > cfg.duplicate_atom_threshold))
        .collect();
    if dups.is_empty() {
        return Ok(None);
    }
    let mut trial = d.clone();
    let mut used = Vec::new();
    for &a in &dups {
        reseed_atom(w, &mut trial, residual, a, &mut used, rng);
    }
    let mut coeffs = encode_rows(&OmpEncoder::new(&trial, s)?, w)?;
    let mut res = residual_matrix(w, &coeffs, &trial);
    update_atoms(w, &mut trial, &mut coeffs, &mut res, cfg, rng);
    let res = residual_matrix(w, &coeffs, &trial);
    let obj = res.frobenius_norm().powi(2);
    log::debug!("ksvd: trial reseed of {} duplicate atoms gives objective {obj}", dups.len());
    Ok(Some((trial, coeffs, res, obj)))
}

/// Objective, relative to `‖W‖²`, treated as an exact fit.
const EXACT_FIT: f64 = 1e-24;

fn random_unit_rows(k: usize, b: usize, rng: &mut Rng) -> DenseMatrix {
    let mut d = DenseMatrix::random_normal(k, b, rng);
    for i in 0..k {
        normalize(d.row_mut(i));
    }
    d
}

fn normalize(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// `k` rows sampled without replacement from the block (Gaussian padding if
/// the block is short), each normalized; zero rows are replaced by Gaussian
/// rows.
fn initial_dictionary(w: &DenseMatrix, k: usize, rng: &mut Rng) -> DenseMatrix {
    let (m, b) = w.shape();
    let take = k.min(m);
    let picks = rng.sample_without_replacement(m, take);
    let mut d = DenseMatrix::zeros(k, b);
    for (a, &r) in picks.iter().enumerate() {
        d.row_mut(a).copy_from_slice(w.row(r));
    }
    for a in 0..k {
        if !normalize(d.row_mut(a)) {
            for x in d.row_mut(a) {
                *x = rng.normal();
            }
            normalize(d.row_mut(a));
        }
    }
    d
}

fn residual_matrix(w: &DenseMatrix, coeffs: &SparseCoefficients, d: &DenseMatrix) -> DenseMatrix {
    w.sub(&coeffs.apply(d).expect("consistent dims"))
        .expect("consistent dims")
}

fn recode_keep_better(
    w: &DenseMatrix,
    d: &DenseMatrix,
    coeffs: &mut SparseCoefficients,
    residual: &mut DenseMatrix,
    s: usize,
) -> Result<()> {
    let fresh = encode_rows(&OmpEncoder::new(d, s)?, w)?;
    for j in 0..w.rows() {
        let row = fresh.row(j);
        let approx = row.combine(d);
        let new_res: Vec<f64> = w.row(j).iter().zip(&approx).map(|(a, b)| a - b).collect();
        let old_sq = dot(residual.row(j), residual.row(j));
        if dot(&new_res, &new_res) < old_sq {
            coeffs.set_row(j, &row);
            residual.row_mut(j).copy_from_slice(&new_res);
        }
    }
    Ok(())
}

fn update_atoms(
    w: &DenseMatrix,
    d: &mut DenseMatrix,
    coeffs: &mut SparseCoefficients,
    residual: &mut DenseMatrix,
    cfg: &KsvdConfig,
    rng: &mut Rng,
) {
    let (k, b) = d.shape();
    let s = coeffs.s();
    let mut reseeded_rows: Vec<usize> = Vec::new();
    for atom in 0..k {
        let users = coeffs.rows_using(atom as u32);
        if (users.len() as f64) < cfg.atom_replacement_threshold {
            // Rows still using a rare atom lose its contribution, so only a
            // threshold above 1 can raise the objective here.
            let vals = coeffs.values_mut();
            for &(j, pos) in &users {
                let x = std::mem::replace(&mut vals[j * s + pos], 0.0);
                for (res, &da) in residual.row_mut(j).iter_mut().zip(d.row(atom)) {
                    *res += x * da;
                }
            }
            reseed_atom(w, d, residual, atom, &mut reseeded_rows, rng);
            continue;
        }
        // restricted residual with this atom's contribution added back
        let d_row = d.row(atom).to_vec();
        let mut er = DenseMatrix::zeros(users.len(), b);
        for (r, &(j, pos)) in users.iter().enumerate() {
            let x = coeffs.row_values(j)[pos];
            for ((e, &res), &da) in er.row_mut(r).iter_mut().zip(residual.row(j)).zip(&d_row) {
                *e = res + x * da;
            }
        }
        let Some((v, xs)) = dominant_pair(&er, &d_row) else {
            continue;
        };
        d.row_mut(atom).copy_from_slice(&v);
        let vals = coeffs.values_mut();
        for (r, &(j, pos)) in users.iter().enumerate() {
            vals[j * s + pos] = xs[r];
            for ((res, &e), &va) in residual.row_mut(j).iter_mut().zip(er.row(r)).zip(&v) {
                *res = e - xs[r] * va;
            }
        }
    }
}

/// Dominant right singular vector `v` of `E` and `E·v`, by power iteration
/// on `EᵀE` started from `warm` (the current atom). `‖E·v‖` never decreases
/// along the iteration, so the atom update cannot raise the objective.
/// Returns `None` for an all-zero input.
fn dominant_pair(e: &DenseMatrix, warm: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let apply = |v: &[f64]| -> Vec<f64> { (0..e.rows()).map(|r| dot(e.row(r), v)).collect() };
    let gram_apply = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; e.cols()];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &er) in out.iter_mut().zip(e.row(r)) {
                *o += xr * er;
            }
        }
        out
    };

    let mut v = warm.to_vec();
    let mut xs = apply(&v);
    let mut energy = dot(&xs, &xs);
    // a start nearly orthogonal to the dominant direction converges slowly;
    // the largest residual row is a better start whenever it already wins
    let (best_row, best_norm) = (0..e.rows())
        .map(|r| (r, dot(e.row(r), e.row(r))))
        .fold((0, 0.0), |acc, (r, n)| if n > acc.1 { (r, n) } else { acc });
    if best_norm == 0.0 {
        return None;
    }
    let mut alt = e.row(best_row).to_vec();
    normalize(&mut alt);
    let alt_xs = apply(&alt);
    if dot(&alt_xs, &alt_xs) > energy {
        v = alt;
        xs = alt_xs;
        energy = dot(&xs, &xs);
    }

    for _ in 0..POWER_MAX_ITERS {
        let mut next = gram_apply(&xs);
        if !normalize(&mut next) {
            break;
        }
        let next_xs = apply(&next);
        let next_energy = dot(&next_xs, &next_xs);
        if next_energy < energy {
            break;
        }
        let gain = next_energy - energy;
        v = next;
        xs = next_xs;
        energy = next_energy;
        if gain <= POWER_TOL * energy {
            break;
        }
    }

    // deterministic sign: largest-magnitude component positive
    let pivot = v
        .iter()
        .copied()
        .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
        xs.iter_mut().for_each(|x| *x = -*x);
    }
    Some((v, xs))
}

const POWER_MAX_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-14;

/// Replaces an unused atom with the worst-reconstructed row not yet used for
/// reseeding in this sweep. The objective is unchanged since no row uses it.
fn reseed_atom(
    w: &DenseMatrix,
    d: &mut DenseMatrix,
    residual: &DenseMatrix,
    atom: usize,
    used: &mut Vec<usize>,
    rng: &mut Rng,
) {
    let mut worst: Option<(usize, f64)> = None;
    for j in 0..w.rows() {
        if used.contains(&j) {
            continue;
        }
        let e = dot(residual.row(j), residual.row(j));
        match worst {
            Some((_, best)) if e <= best => {}
            _ => worst = Some((j, e)),
        }
    }
    let row = d.row_mut(atom);
    match worst {
        Some((j, _)) => {
            used.push(j);
            row.copy_from_slice(w.row(j));
            if normalize(row) {
                return;
            }
        }
        None => {}
    }
    for x in row.iter_mut() {
        *x = rng.normal();
    }
    normalize(row);
}

/// Singular value decomposition sorted by decreasing singular value.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `M × r` left singular vectors.
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    /// `r × N` right singular vectors (as rows).
    pub vt: DenseMatrix,
}

impl TruncatedSvd {
    pub fn compute(w: &DenseMatrix) -> Result<Self> {
        let svd = w.to_nalgebra().svd(true, true);
        let u = svd.u.ok_or_else(|| Error::Numeric("svd: U not computed".into()))?;
        let vt = svd.v_t.ok_or_else(|| Error::Numeric("svd: Vt not computed".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sigma = order.iter().map(|&i| svd.singular_values[i]).collect();
        let u_sorted = DenseMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
        let vt_sorted = DenseMatrix::from_fn(order.len(), vt.ncols(), |i, j| vt[(order[i], j)]);
        Ok(Self {
            u: u_sorted,
            sigma,
            vt: vt_sorted,
        })
    }

    pub fn max_rank(&self) -> usize {
        self.sigma.len()
    }

    /// `(U_r · diag(σ_r), V_rᵀ)`.
    pub fn factors(&self, rank: usize) -> Result<(DenseMatrix, DenseMatrix)> {
        check_rank(rank, self.u.rows(), self.vt.cols())?;
        let left = DenseMatrix::from_fn(self.u.rows(), rank, |i, j| self.u.get(i, j) * self.sigma[j]);
        let right = self.vt.row_block(0..rank);
        Ok((left, right))
    }

    /// `sqrt(Σ_{i>rank} σ_i²)`, the Eckart–Young optimum.
    pub fn tail_error(&self, rank: usize) -> f64 {
        self.sigma.iter().skip(rank).map(|s| s * s).sum::<f64>().sqrt()
    }
}

fn check_rank(rank: usize, m: usize, n: usize) -> Result<()> {
    if rank == 0 || rank > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} outside [1, {}]",
            m.min(n)
        )));
    }
    Ok(())
}

/// Best rank-`rank` approximation `W ≈ L · R` in Frobenius norm.
pub fn lowrank_factor(w: &DenseMatrix, rank: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    check_rank(rank, w.rows(), w.cols())?;
    TruncatedSvd::compute(w)?.factors(rank)
}

/// Storage for the two binary32 low-rank factors: `4·rank·(m + n)`.
pub fn lowrank_bytes(m: usize, n: usize, rank: usize) -> u64 {
    4 * rank as u64 * (m as u64 + n as u64)
}

/// Smallest rank whose factor storage is at least `budget` bytes, capped at
/// `min(m, n)`.
pub fn rank_for_budget(m: usize, n: usize, budget: f64) -> usize {
    let per_rank = 4.0 * (m + n) as f64;
    ((budget / per_rank).ceil() as usize).clamp(1, m.min(n))
}
