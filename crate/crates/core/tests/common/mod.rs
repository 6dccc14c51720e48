//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical routines.
#![allow(dead_code)]

use dsfactor_core::{BlockFactor, BlockPlan, DSFactorization, DenseMatrix, Rng, SparseCoefficients};

/// Triple-loop product.
pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

pub fn fro(a: &DenseMatrix) -> f64 {
    a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn fro_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(a: &DenseMatrix) -> Vec<f64> {
    // work on the orientation with fewer columns
    let m = if a.cols() > a.rows() { a.transpose() } else { a.clone() };
    let (rows, cols) = m.shape();
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| m.get(i, j)).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|v| v * v).sum();
                let beta: f64 = u[q].iter().map(|v| v * v).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = u.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// `sqrt(Σ_{i ≥ rank} σ_i²)` from the Jacobi singular values.
pub fn tail_energy(a: &DenseMatrix, rank: usize) -> f64 {
    jacobi_singular_values(a)[rank..].iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Squared distance from `target` to the span of `cols`, by modified
/// Gram-Schmidt with dependent columns dropped.
pub fn projection_residual_sq(cols: &[&[f64]], target: &[f64]) -> f64 {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut v = c.to_vec();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for q in &basis {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-10 * norm0.max(1e-300) {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut r = target.to_vec();
    for _ in 0..2 {
        for q in &basis {
            let p: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
    }
    r.iter().map(|x| x * x).sum()
}

/// All `s`-subsets of `0..k` in lexicographic order.
pub fn subsets(k: usize, s: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, s: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == s {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, s, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, s, &mut Vec::new(), &mut out);
    out
}

/// Minimum squared residual over every support of size `s`.
pub fn best_subset_residual_sq(dict: &DenseMatrix, target: &[f64], s: usize) -> f64 {
    subsets(dict.rows(), s)
        .iter()
        .map(|sub| {
            let cols: Vec<&[f64]> = sub.iter().map(|&i| dict.row(i)).collect();
            projection_residual_sq(&cols, target)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Central difference `(f(x+h) − f(x−h)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error of a gradient against its finite-difference estimate.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

/// Dictionary with unit-norm rows.
pub fn unit_rows(k: usize, b: usize, rng: &mut Rng) -> DenseMatrix {
    let mut d = DenseMatrix::random_normal(k, b, rng);
    for i in 0..k {
        let n = d.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        d.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    d
}

/// Planted model: returns `(W, true coefficients as dense M × K, D)` with
/// `W = S·D`, each row of `S` supported on `s` random atoms.
pub fn planted(m: usize, k: usize, b: usize, s: usize, rng: &mut Rng) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let d = unit_rows(k, b, rng);
    let mut coeffs = DenseMatrix::zeros(m, k);
    for j in 0..m {
        for a in rng.sample_without_replacement(k, s) {
            let mut v = rng.normal();
            // keep coefficients away from zero so supports are identifiable
            v += v.signum() * 0.5;
            coeffs.set(j, a, v);
        }
    }
    (naive_matmul(&coeffs, &d), coeffs, d)
}

/// Block-diagonal assembly of `blocks`.
pub fn block_diag(blocks: &[DenseMatrix]) -> DenseMatrix {
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let cols: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = DenseMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out.set(r0 + i, c0 + j, b.get(i, j));
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}

/// Exhaustive search for the tile maximizing `P·Q·S` on the cache-load
/// equality `PQ + PS + KQ = C`: every integer `P`, with `Q` solved from the
/// equality. Returns `(P, Q)`.
pub fn tile_grid_argmax(cap: usize, k: usize, s: usize) -> (f64, f64) {
    let c = cap as f64;
    let (kf, sf) = (k as f64, s as f64);
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    for p in 1..=cap / s {
        let p = p as f64;
        let q = (c - p * sf) / (p + kf);
        if q <= 0.0 {
            continue;
        }
        let obj = p * q * sf;
        if obj > best.2 {
            best = (p, q, obj);
        }
    }
    (best.0, best.1)
}

/// Integer-only exhaustive search, returning the best `p·q` under the load
/// constraint.
pub fn tile_integer_best(cap: usize, k: usize, s: usize) -> usize {
    let mut best = 0;
    for p in 1..=cap / s {
        let rem = cap as isize - (p * s) as isize;
        if rem <= 0 {
            break;
        }
        let q = rem as usize / (p + k);
        best = best.max(p * q);
    }
    best
}

/// Random valid factorization with Gaussian values and dictionaries.
pub fn random_factorization(m: usize, n: usize, plan: BlockPlan, rng: &mut Rng) -> DSFactorization {
    let blocks = (0..n / plan.b)
        .map(|_| {
            let mut idx = Vec::with_capacity(m * plan.s);
            for _ in 0..m {
                let mut sub = rng.sample_without_replacement(plan.k, plan.s);
                sub.sort();
                idx.extend(sub.into_iter().map(|i| i as u32));
            }
            let vals = (0..m * plan.s).map(|_| rng.normal()).collect();
            BlockFactor {
                coeffs: SparseCoefficients::new(m, plan.k, plan.s, idx, vals).unwrap(),
                dictionary: DenseMatrix::random_normal(plan.k, plan.b, rng),
                objective_history: Vec::new(),
            }
        })
        .collect();
    DSFactorization::new(m, n, plan, blocks).unwrap()
}
