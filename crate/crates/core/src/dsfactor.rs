//! Block-wise dense-sparse factorization of a whole weight matrix.
//!
//! `W (M × N)` is split into `N / B` column blocks `W_i (M × B)`; each block
//! is approximated as `S_i · D_i` with `S_i` an `M × K` coefficient matrix
//! holding exactly `S` nonzeros per row and `D_i` a dense `K × B` dictionary.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_all, read_u32, write_atomically};
use crate::ksvd::{ksvd_factor, lowrank_bytes, BlockFactor, KsvdConfig, TruncatedSvd};
use crate::matrix::{frobenius_error, matmul_dense, DenseMatrix};
use crate::omp::SparseCoefficients;
use crate::planner::compression_report;

/// Factorization hyper-parameters: block width `b`, dictionary size `k`,
/// nonzeros per coefficient row `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockPlan {
    pub b: usize,
    pub k: usize,
    pub s: usize,
}

/// Result of converting `(γ, δ)` ratios into integer `(K, S)`.
#[derive(Debug, Clone)]
pub struct RoundedPlan {
    pub plan: BlockPlan,
    /// Human-readable notes for every value that had to be rounded.
    pub notes: Vec<String>,
}

impl BlockPlan {
    pub fn new(b: usize, k: usize, s: usize) -> Self {
        Self { b, k, s }
    }

    /// `K = round(γ·M)`, `S = round(δ·B)`.
    pub fn from_ratios(m: usize, b: usize, gamma: f64, delta: f64) -> Result<RoundedPlan> {
        if !(gamma > 0.0 && gamma.is_finite()) || !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Plan(format!(
                "gamma and delta must be positive, got gamma={gamma}, delta={delta}"
            )));
        }
        let k_real = gamma * m as f64;
        let s_real = delta * b as f64;
        let k = k_real.round() as usize;
        let s = s_real.round() as usize;
        let mut notes = Vec::new();
        if (k as f64 - k_real).abs() > 1e-9 {
            notes.push(format!("K = gamma*M = {k_real} rounded to {k}"));
        }
        if (s as f64 - s_real).abs() > 1e-9 {
            notes.push(format!("S = delta*B = {s_real} rounded to {s}"));
        }
        Ok(RoundedPlan {
            plan: BlockPlan { b, k, s },
            notes,
        })
    }

    /// `γ = K / M`
    pub fn gamma(&self, m: usize) -> f64 {
        self.k as f64 / m as f64
    }

    /// `δ = S / B`
    pub fn delta(&self) -> f64 {
        self.s as f64 / self.b as f64
    }

    pub fn blocks(&self, n: usize) -> usize {
        n / self.b
    }

    /// Checks every dimension constraint against an `m × n` matrix and names
    /// the first one violated.
    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        let BlockPlan { b, k, s } = *self;
        if b == 0 {
            return Err(Error::Plan("block width B must be positive".into()));
        }
        if n % b != 0 {
            return Err(Error::Plan(format!(
                "N % B must be 0 (N={n}, B={b}); blocks are not padded"
            )));
        }
        if k <= b {
            return Err(Error::Plan(format!(
                "B < K is required so each dictionary can have full rank B (B={b}, K={k})"
            )));
        }
        if k > m {
            return Err(Error::Plan(format!(
                "K <= M is required for a compact dictionary (K={k}, M={m})"
            )));
        }
        if s == 0 {
            return Err(Error::Plan("S >= 1 is required".into()));
        }
        if s >= b {
            return Err(Error::Plan(format!("S < B is required (S={s}, B={b})")));
        }
        if k > u16::MAX as usize + 1 {
            return Err(Error::Plan(format!(
                "K={k} does not fit 16-bit atom indices"
            )));
        }
        if 2 * k > m {
            log::warn!("K={k} exceeds M/2={}; the dictionary is not small relative to M", m / 2);
        }
        Ok(())
    }
}

/// Ordered block factors of an `m × n` matrix.
#[derive(Debug, Clone)]
pub struct DSFactorization {
    pub m: usize,
    pub n: usize,
    pub plan: BlockPlan,
    pub blocks: Vec<BlockFactor>,
}

impl DSFactorization {
    /// Structural validation: block count and every block's dimensions.
    pub fn new(m: usize, n: usize, plan: BlockPlan, blocks: Vec<BlockFactor>) -> Result<Self> {
        if plan.b == 0 || n % plan.b != 0 {
            return Err(Error::Plan(format!("N={n} is not a multiple of B={}", plan.b)));
        }
        if blocks.len() != n / plan.b {
            return Err(Error::Dimension(format!(
                "expected {} blocks, got {}",
                n / plan.b,
                blocks.len()
            )));
        }
        for (i, f) in blocks.iter().enumerate() {
            let c = &f.coeffs;
            if c.m() != m || c.k() != plan.k || c.s() != plan.s {
                return Err(Error::Dimension(format!("block {i}: coefficient dims disagree with plan")));
            }
            if f.dictionary.shape() != (plan.k, plan.b) {
                return Err(Error::Dimension(format!("block {i}: dictionary is not K x B")));
            }
        }
        Ok(Self { m, n, plan, blocks })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Explicit `(S, D)` with `S` the `M × NK/B` horizontal stack of the
    /// coefficient blocks and `D` the `NK/B × N` block-diagonal dictionary.
    pub fn stacked_view(&self) -> (DenseMatrix, DenseMatrix) {
        let BlockPlan { b, k, .. } = self.plan;
        let nb = self.blocks.len();
        let mut s_all = DenseMatrix::zeros(self.m, nb * k);
        let mut d_all = DenseMatrix::zeros(nb * k, self.n);
        for (i, f) in self.blocks.iter().enumerate() {
            s_all.set_column_block(i * k, &f.coeffs.to_dense());
            for a in 0..k {
                d_all.row_mut(i * k + a)[i * b..(i + 1) * b].copy_from_slice(f.dictionary.row(a));
            }
        }
        (s_all, d_all)
    }
}

/// Factors every column block of `w` independently; block `i` draws its
/// randomness from `cfg.rng.fork(i)`.
pub fn factorize(w: &DenseMatrix, plan: BlockPlan, cfg: &KsvdConfig) -> Result<DSFactorization> {
    let (m, n) = w.shape();
    plan.validate(m, n)?;
    cfg.validate()?;
    let blocks: Result<Vec<BlockFactor>> = (0..plan.blocks(n))
        .into_par_iter()
        .map(|i| {
            let block = w.column_block(i * plan.b..(i + 1) * plan.b);
            let block_cfg = KsvdConfig {
                rng: cfg.rng.fork(i as u64),
                ..cfg.clone()
            };
            ksvd_factor(&block, plan.k, plan.s, &block_cfg)
        })
        .collect();
    DSFactorization::new(m, n, plan, blocks?)
}

/// `[S_1·D_1, …, S_{N/B}·D_{N/B}]`.
pub fn reconstruct(f: &DSFactorization) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(f.m, f.n);
    for (i, block) in f.blocks.iter().enumerate() {
        out.set_column_block(i * f.plan.b, &block.reconstruct());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMethod {
    DenseSparse,
    LowRank,
}

/// One point of an error-vs-storage curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub method: CurveMethod,
    /// Set for dense-sparse points.
    pub plan: Option<BlockPlan>,
    /// Set for low-rank points.
    pub rank: Option<usize>,
    /// Compressed size; dense-sparse points use bit-packed index accounting.
    pub bytes: f64,
    /// `bytes / (4·M·N)`
    pub cr: f64,
    pub rel_error: f64,
}

impl CurvePoint {
    pub fn label(&self) -> String {
        match (self.method, self.plan, self.rank) {
            (CurveMethod::DenseSparse, Some(p), _) => format!("ds[b={};k={};s={}]", p.b, p.k, p.s),
            (CurveMethod::LowRank, _, Some(r)) => format!("lowrank[r={r}]"),
            _ => "unknown".into(),
        }
    }
}

/// Relative approximation error against storage for each dense-sparse plan
/// and each low-rank rank.
pub fn error_curve(
    w: &DenseMatrix,
    plans: &[BlockPlan],
    ranks: &[usize],
    cfg: &KsvdConfig,
) -> Result<Vec<CurvePoint>> {
    if plans.is_empty() && ranks.is_empty() {
        return Err(Error::InvalidArgument("error curve needs at least one plan or rank".into()));
    }
    let (m, n) = w.shape();
    let dense_bytes = 4.0 * m as f64 * n as f64;
    let mut out = Vec::with_capacity(plans.len() + ranks.len());
    for &plan in plans {
        let report = compression_report(m, n, plan)?;
        let f = factorize(w, plan, cfg)?;
        out.push(CurvePoint {
            method: CurveMethod::DenseSparse,
            plan: Some(plan),
            rank: None,
            bytes: report.ds_bytes_packed,
            cr: report.cr,
            rel_error: frobenius_error(w, &reconstruct(&f))?,
        });
    }
    if !ranks.is_empty() {
        let svd = TruncatedSvd::compute(w)?;
        for &r in ranks {
            let (l, rt) = svd.factors(r)?;
            let approx = matmul_dense(&l, &rt)?;
            let bytes = lowrank_bytes(m, n, r) as f64;
            out.push(CurvePoint {
                method: CurveMethod::LowRank,
                plan: None,
                rank: Some(r),
                bytes,
                cr: bytes / dense_bytes,
                rel_error: frobenius_error(w, &approx)?,
            });
        }
    }
    Ok(out)
}

/// CSV with columns `method, bytes, cr, rel_error`.
pub fn write_curve_csv(points: &[CurvePoint], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "bytes", "cr", "rel_error"])?;
    for p in points {
        w.write_record([
            p.label(),
            p.bytes.to_string(),
            p.cr.to_string(),
            p.rel_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const DSF_MAGIC: &[u8; 4] = b"DSF1";
/// Magic plus five u32 fields.
pub const DSF_HEADER_LEN: usize = 24;

/// Writes the DSF layout: magic, `m n b k s` as u32, then per block the
/// dictionary (`K·B` binary32), indices (`M·S` u16) and values (`M·S`
/// binary32), all little-endian and row-major.
pub fn encode_dsf(f: &DSFactorization, out: &mut dyn Write) -> Result<()> {
    let BlockPlan { b, k, s } = f.plan;
    if k > u16::MAX as usize + 1 {
        return Err(Error::Format(format!("K={k} does not fit 16-bit indices")));
    }
    out.write_all(DSF_MAGIC)?;
    for v in [f.m, f.n, b, k, s] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::new();
    for block in &f.blocks {
        buf.clear();
        for &v in block.dictionary.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &i in block.coeffs.indices() {
            buf.extend_from_slice(&(i as u16).to_le_bytes());
        }
        for &v in block.coeffs.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn decode_dsf(bytes: &[u8]) -> Result<DSFactorization> {
    if bytes.len() < 4 || &bytes[..4] != DSF_MAGIC {
        return Err(Error::Format("not a DSF file (bad magic)".into()));
    }
    if bytes.len() < DSF_HEADER_LEN {
        return Err(Error::Format("truncated DSF header".into()));
    }
    let field = |i: usize| read_u32(bytes, 4 + 4 * i) as usize;
    let (m, n, b, k, s) = (field(0), field(1), field(2), field(3), field(4));
    if m == 0 || n == 0 || b == 0 || k == 0 || s == 0 {
        return Err(Error::Format(format!(
            "DSF header has a zero field (m={m}, n={n}, b={b}, k={k}, s={s})"
        )));
    }
    if n % b != 0 || s > k || k > u16::MAX as usize + 1 {
        return Err(Error::Format(format!(
            "inconsistent DSF header (m={m}, n={n}, b={b}, k={k}, s={s})"
        )));
    }
    let per_block = (|| (k.checked_mul(b)?.checked_mul(4))?.checked_add(m.checked_mul(s)?.checked_mul(6)?))();
    let expected = per_block
        .and_then(|p| p.checked_mul(n / b))
        .ok_or_else(|| Error::Format("DSF dimensions overflow".into()))?;
    let body = &bytes[DSF_HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "DSF payload is {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let plan = BlockPlan { b, k, s };
    let mut blocks = Vec::with_capacity(n / b);
    let mut at = 0;
    let f32_at = |at: usize| f32::from_le_bytes(body[at..at + 4].try_into().unwrap()) as f64;
    for i in 0..n / b {
        let dict: Vec<f64> = (0..k * b).map(|j| f32_at(at + 4 * j)).collect();
        at += 4 * k * b;
        let indices: Vec<u32> = (0..m * s)
            .map(|j| u16::from_le_bytes([body[at + 2 * j], body[at + 2 * j + 1]]) as u32)
            .collect();
        at += 2 * m * s;
        let values: Vec<f64> = (0..m * s).map(|j| f32_at(at + 4 * j)).collect();
        at += 4 * m * s;
        let coeffs = SparseCoefficients::new(m, k, s, indices, values)
            .map_err(|e| Error::Format(format!("block {i}: {e}")))?;
        blocks.push(BlockFactor {
            coeffs,
            dictionary: DenseMatrix::new(k, b, dict)?,
            objective_history: Vec::new(),
        });
    }
    DSFactorization::new(m, n, plan, blocks)
}

pub fn serialize_dsf(f: &DSFactorization, path: &Path) -> Result<()> {
    write_atomically(path, |w| encode_dsf(f, w))
}

pub fn deserialize_dsf(path: &Path) -> Result<DSFactorization> {
    decode_dsf(&read_all(path)?)
}
