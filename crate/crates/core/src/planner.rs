//! Storage, flop and cache-intensity accounting for dense-sparse factors.
//!
//! Per block the factors take `4·K·B` dictionary bytes plus `4·S·M` value
//! bytes plus the atom indices. Indices are counted two ways: bit-packed at
//! `log₂K` bits each (`ds_bytes_packed`) and as the 16-bit integers the DSF
//! file actually stores (`ds_bytes_file`).

use crate::dsfactor::BlockPlan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub m: usize,
    pub n: usize,
    pub plan: BlockPlan,
    pub dense_bytes: u64,
    /// Bit-packed index accounting; fractional because `log₂K` usually is.
    pub ds_bytes_packed: f64,
    /// 16-bit index accounting, equal to the DSF payload size.
    pub ds_bytes_file: u64,
    /// `ds_bytes_packed / dense_bytes`
    pub cr: f64,
    /// `γ + (1 + (log₂γ + log₂M)/32)·δ`
    pub cr_closed_form: f64,
    /// `ds_bytes_file / dense_bytes`
    pub cr_file: f64,
    /// `1 / cr`, the "N× smaller" convention.
    pub inverse_cr: f64,
    /// `ds_flops / dense_flops = γ + δ`
    pub flops_ratio: f64,
}

/// Compression report for an `m × n` matrix under a validated plan.
pub fn compression_report(m: usize, n: usize, plan: BlockPlan) -> Result<CompressionReport> {
    plan.validate(m, n)?;
    compression_report_unchecked(m, n, plan)
}

/// Same accounting without the plan's dimension constraints, for diagnostic
/// limits such as `γ = δ = 1`. Only requires `B | N` and positive sizes.
pub fn compression_report_unchecked(m: usize, n: usize, plan: BlockPlan) -> Result<CompressionReport> {
    let BlockPlan { b, k, s } = plan;
    if m == 0 || n == 0 || b == 0 || k == 0 || s == 0 || n % b != 0 {
        return Err(Error::Plan(format!(
            "accounting needs positive sizes and B | N (m={m}, n={n}, b={b}, k={k}, s={s})"
        )));
    }
    let blocks = (n / b) as u64;
    let (m64, k64, s64, b64) = (m as u64, k as u64, s as u64, b as u64);
    let dense_bytes = 4 * m64 * n as u64;
    let value_bytes = blocks * (4 * k64 * b64 + 4 * s64 * m64);
    let index_count = blocks * s64 * m64;
    let ds_bytes_packed = value_bytes as f64 + index_count as f64 * (k as f64).log2() / 8.0;
    let ds_bytes_file = value_bytes + 2 * index_count;
    let cr = ds_bytes_packed / dense_bytes as f64;

    let gamma = plan.gamma(m);
    let delta = plan.delta();
    let cr_closed_form = gamma + (1.0 + (gamma.log2() + (m as f64).log2()) / 32.0) * delta;
    if (cr - cr_closed_form).abs() > 1e-12 * cr.max(1.0) {
        return Err(Error::Numeric(format!(
            "byte count cr {cr} disagrees with closed form {cr_closed_form}"
        )));
    }
    let (dense_flops, ds_flops) = flops_count(m, n, plan, 1);
    Ok(CompressionReport {
        m,
        n,
        plan,
        dense_bytes,
        ds_bytes_packed,
        ds_bytes_file,
        cr,
        cr_closed_form,
        cr_file: ds_bytes_file as f64 / dense_bytes as f64,
        inverse_cr: 1.0 / cr,
        flops_ratio: ds_flops as f64 / dense_flops as f64,
    })
}

/// Totals over several factorized matrices (e.g. the six weights of one
/// transformer layer).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub dense_bytes: u64,
    pub ds_bytes_packed: f64,
    pub ds_bytes_file: u64,
    pub cr: f64,
    pub inverse_cr: f64,
}

pub fn aggregate_report(reports: &[CompressionReport]) -> AggregateReport {
    let dense_bytes: u64 = reports.iter().map(|r| r.dense_bytes).sum();
    let ds_bytes_packed: f64 = reports.iter().map(|r| r.ds_bytes_packed).sum();
    let ds_bytes_file = reports.iter().map(|r| r.ds_bytes_file).sum();
    let cr = ds_bytes_packed / dense_bytes as f64;
    AggregateReport {
        dense_bytes,
        ds_bytes_packed,
        ds_bytes_file,
        cr,
        inverse_cr: 1.0 / cr,
    }
}

/// The six weight shapes `(M, N)` of one BERT-base style layer with hidden
/// size `hidden` and FFN size `ffn`: Q, K, V, O, FFN-1, FFN-2.
pub fn transformer_layer_shapes(hidden: usize, ffn: usize) -> [(usize, usize); 6] {
    [
        (hidden, hidden),
        (hidden, hidden),
        (hidden, hidden),
        (hidden, hidden),
        (ffn, hidden),
        (hidden, ffn),
    ]
}

/// `(dense_flops, ds_flops)` for multiplying by an `n × seq_len` input:
/// dense `2·M·N·L`; factored `Σ_blocks 2·K·B·L + 2·S·M·L`.
pub fn flops_count(m: usize, n: usize, plan: BlockPlan, seq_len: usize) -> (u64, u64) {
    let (m, n, l) = (m as u64, n as u64, seq_len as u64);
    let (b, k, s) = (plan.b as u64, plan.k as u64, plan.s as u64);
    let dense = 2 * m * n * l;
    let ds = (n / b) * (2 * k * b * l + 2 * s * m * l);
    (dense, ds)
}

/// Two-level memory model: a fast cache of `cache_bytes` in front of RAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheModel {
    pub cache_bytes: usize,
    pub element_bytes: usize,
    pub k: usize,
    pub s: usize,
}

impl CacheModel {
    /// Cache capacity in elements, `C / element_bytes`.
    pub fn capacity(&self) -> usize {
        self.cache_bytes / self.element_bytes
    }

    /// Elements resident for a `p × q` output tile: `pq + ps + kq`.
    pub fn load(&self, p: usize, q: usize) -> usize {
        p * q + p * self.s + self.k * q
    }

    pub fn intensity(&self, p: usize, q: usize) -> f64 {
        (p * q * self.s) as f64 / self.load(p, q) as f64
    }

    /// Real-valued maximizer of `P·Q·S` on `PQ + PS + KQ = C`. The Lagrange
    /// condition gives `Q·K = P·S`, hence
    /// `Q* = −S + sqrt(S² + C·S/K)` and `P* = −K + sqrt(K² + C·K/S)`.
    pub fn stationary_point(&self) -> (f64, f64) {
        let c = self.capacity() as f64;
        let (k, s) = (self.k as f64, self.s as f64);
        let q = -s + (s * s + c * s / k).sqrt();
        let p = -k + (k * k + c * k / s).sqrt();
        (p, q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilePlan {
    /// Output rows per tile.
    pub p: usize,
    /// Output columns per tile.
    pub q: usize,
    /// `p·q·s / (p·q + p·s + k·q)`
    pub ci: f64,
    /// Elements resident in cache for one tile.
    pub load: usize,
}

/// Integer tile at the real stationary point: among the floors and ceilings
/// of `(P*, Q*)`, the feasible tile with the largest `p·q`. The floors always
/// fit since the load equals `C` at the stationary point, and every candidate
/// keeps the Lagrange slack `|q·k − p·s| ≤ s + k`. Tiles further away can
/// occasionally have a slightly larger integer product but drift off the
/// closed form.
pub fn optimal_tile(model: CacheModel) -> Result<TilePlan> {
    let CacheModel {
        cache_bytes,
        element_bytes,
        k,
        s,
    } = model;
    if cache_bytes == 0 || element_bytes == 0 || k == 0 || s == 0 {
        return Err(Error::InvalidArgument("cache model fields must be positive".into()));
    }
    let cap = model.capacity();
    if cap <= 2 * k.max(s) {
        return Err(Error::InvalidArgument(format!(
            "cache holds {cap} elements; need more than 2*max(k, s) = {}",
            2 * k.max(s)
        )));
    }
    let (p_star, q_star) = model.stationary_point();
    let p0 = (p_star.floor() as usize).max(1);
    let q0 = (q_star.floor() as usize).max(1);

    let slack = |p: usize, q: usize| (q * k).abs_diff(p * s) <= s + k;
    let mut best: Option<(usize, usize)> = None;
    let mut fallback: Option<(usize, usize)> = None;
    for p in p0..=p0 + 1 {
        for q in q0..=q0 + 1 {
            if model.load(p, q) > cap {
                continue;
            }
            let better = |cur: Option<(usize, usize)>| cur.is_none_or(|(bp, bq)| p * q > bp * bq);
            if better(fallback) {
                fallback = Some((p, q));
            }
            if slack(p, q) && better(best) {
                best = Some((p, q));
            }
        }
    }
    let (p, q) = best
        .or(fallback)
        .ok_or_else(|| Error::Numeric("no feasible tile near the stationary point".into()))?;
    Ok(TilePlan {
        p,
        q,
        ci: model.intensity(p, q),
        load: model.load(p, q),
    })
}
