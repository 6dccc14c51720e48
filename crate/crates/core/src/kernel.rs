//! Inference product `W·X = Σ_i S_i · (D_i · X_i)`.
//!
//! The dense stage `X̄_i = D_i · X_i` goes through [`matmul_dense`]. The
//! sparse stage `O = S · X̄` has a naive reference loop and a cache-blocked
//! loop over `P × Q` output tiles. In the blocked loop the `K × Q` panel of
//! `X̄` is the resident operand and the `P` coefficient rows of the tile are
//! streamed, each row touching only its `S` selected panel rows.
//!
//! Every output element accumulates its `S` products in ascending atom order
//! starting from zero, so both modes and every tiling give bitwise identical
//! results.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::dsfactor::DSFactorization;
use crate::error::{Error, Result};
use crate::matrix::{matmul_dense, DenseMatrix};
use crate::omp::SparseCoefficients;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    Reference,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub tile_p: usize,
    pub tile_q: usize,
    pub mode: KernelMode,
}

impl KernelConfig {
    pub fn reference() -> Self {
        Self {
            tile_p: 1,
            tile_q: 1,
            mode: KernelMode::Reference,
        }
    }

    pub fn blocked(tile_p: usize, tile_q: usize) -> Self {
        Self {
            tile_p,
            tile_q,
            mode: KernelMode::Blocked,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tile_p == 0 || self.tile_q == 0 {
            return Err(Error::InvalidArgument("tile sizes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.mode {
            KernelMode::Reference => "reference".into(),
            KernelMode::Blocked => format!("blocked[{}x{}]", self.tile_p, self.tile_q),
        }
    }
}

/// Work done on one output tile of the sparse stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileStats {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    /// Multiply-accumulates counted in the inner loop.
    pub macs: u64,
}

/// Multiply-accumulates split by stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub dense_stage: u64,
    pub sparse_stage: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.dense_stage + self.sparse_stage
    }
}

fn check_stage_shapes(sc: &SparseCoefficients, xbar: &DenseMatrix) -> Result<()> {
    if sc.k() != xbar.rows() {
        return Err(Error::Dimension(format!(
            "sparse stage: coefficients have k={}, X̄ has {} rows",
            sc.k(),
            xbar.rows()
        )));
    }
    Ok(())
}

/// `O = S · X̄` for an `M × K` coefficient matrix and a `K × L` input.
pub fn sparse_stage(sc: &SparseCoefficients, xbar: &DenseMatrix, cfg: &KernelConfig) -> Result<DenseMatrix> {
    check_stage_shapes(sc, xbar)?;
    cfg.validate()?;
    Ok(match cfg.mode {
        KernelMode::Reference => reference_stage::<false>(sc, xbar).0,
        KernelMode::Blocked => blocked_stage::<false>(sc, xbar, cfg.tile_p, cfg.tile_q).0,
    })
}

/// Blocked sparse stage that also reports the multiply-accumulates performed
/// on every tile, in row-major tile order.
pub fn sparse_stage_instrumented(
    sc: &SparseCoefficients,
    xbar: &DenseMatrix,
    tile_p: usize,
    tile_q: usize,
) -> Result<(DenseMatrix, Vec<TileStats>)> {
    check_stage_shapes(sc, xbar)?;
    KernelConfig::blocked(tile_p, tile_q).validate()?;
    Ok(blocked_stage::<true>(sc, xbar, tile_p, tile_q))
}

fn reference_stage<const COUNT: bool>(sc: &SparseCoefficients, xbar: &DenseMatrix) -> (DenseMatrix, u64) {
    let (m, l) = (sc.m(), xbar.cols());
    let mut out = DenseMatrix::zeros(m, l);
    let mut macs = 0u64;
    for r in 0..m {
        let idx = sc.row_indices(r);
        let vals = sc.row_values(r);
        for c in 0..l {
            let mut acc = 0.0;
            for (&i, &v) in idx.iter().zip(vals) {
                acc += v * xbar.get(i as usize, c);
                if COUNT {
                    macs += 1;
                }
            }
            out.set(r, c, acc);
        }
    }
    (out, macs)
}

fn blocked_stage<const COUNT: bool>(
    sc: &SparseCoefficients,
    xbar: &DenseMatrix,
    tile_p: usize,
    tile_q: usize,
) -> (DenseMatrix, Vec<TileStats>) {
    let (m, l) = (sc.m(), xbar.cols());
    let mut out = DenseMatrix::zeros(m, l);
    let per_task = |(t, chunk): (usize, &mut [f64])| -> Vec<TileStats> {
        let row0 = t * tile_p;
        let rows = chunk.len() / l;
        let mut stats = Vec::new();
        for col0 in (0..l).step_by(tile_q) {
            let col1 = (col0 + tile_q).min(l);
            let mut macs = 0u64;
            for r in 0..rows {
                let out_row = &mut chunk[r * l + col0..r * l + col1];
                let idx = sc.row_indices(row0 + r);
                let vals = sc.row_values(row0 + r);
                for (&i, &v) in idx.iter().zip(vals) {
                    let panel = &xbar.row(i as usize)[col0..col1];
                    for (o, &x) in out_row.iter_mut().zip(panel) {
                        *o += v * x;
                        if COUNT {
                            macs += 1;
                        }
                    }
                }
            }
            if COUNT {
                stats.push(TileStats {
                    row0,
                    col0,
                    rows,
                    cols: col1 - col0,
                    macs,
                });
            }
        }
        stats
    };
    let stats: Vec<Vec<TileStats>> = if m * l * sc.s() >= 1 << 15 {
        out.data_mut()
            .par_chunks_mut(tile_p * l)
            .enumerate()
            .map(per_task)
            .collect()
    } else {
        out.data_mut()
            .chunks_mut(tile_p * l)
            .enumerate()
            .map(per_task)
            .collect()
    };
    (out, stats.into_iter().flatten().collect())
}

fn check_input(f: &DSFactorization, x: &DenseMatrix) -> Result<()> {
    if x.rows() != f.n {
        return Err(Error::Dimension(format!(
            "input has {} rows, factorization has N={}",
            x.rows(),
            f.n
        )));
    }
    Ok(())
}

/// `W·X` computed block by block from the factors.
pub fn ds_matmul(f: &DSFactorization, x: &DenseMatrix, cfg: &KernelConfig) -> Result<DenseMatrix> {
    check_input(f, x)?;
    cfg.validate()?;
    let b = f.plan.b;
    let mut out = DenseMatrix::zeros(f.m, x.cols());
    for (i, block) in f.blocks.iter().enumerate() {
        let xi = x.row_block(i * b..(i + 1) * b);
        let xbar = matmul_dense(&block.dictionary, &xi)?;
        let oi = sparse_stage(&block.coeffs, &xbar, cfg)?;
        out.axpy(1.0, &oi)?;
    }
    Ok(out)
}

/// Reference-mode product with every multiply-accumulate counted.
pub fn ds_matmul_counted(f: &DSFactorization, x: &DenseMatrix) -> Result<(DenseMatrix, MacCount)> {
    check_input(f, x)?;
    let b = f.plan.b;
    let l = x.cols();
    let mut out = DenseMatrix::zeros(f.m, l);
    let mut count = MacCount::default();
    for (i, block) in f.blocks.iter().enumerate() {
        let xi = x.row_block(i * b..(i + 1) * b);
        let d = &block.dictionary;
        // dense stage, counted
        let mut xbar = DenseMatrix::zeros(d.rows(), l);
        for a in 0..d.rows() {
            for c in 0..l {
                let mut acc = 0.0;
                for t in 0..b {
                    acc += d.get(a, t) * xi.get(t, c);
                    count.dense_stage += 1;
                }
                xbar.set(a, c, acc);
            }
        }
        let (oi, macs) = reference_stage::<true>(&block.coeffs, &xbar);
        count.sparse_stage += macs;
        out.axpy(1.0, &oi)?;
    }
    Ok((out, count))
}

/// Order-sensitive hash of the exact output bits.
pub fn checksum(m: &DenseMatrix) -> u64 {
    m.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config: KernelConfig,
    pub samples_ns: Vec<u64>,
    pub time_ns_min: u64,
    pub time_ns_median: u64,
    pub macs: u64,
    pub macs_per_sec: f64,
    pub checksum: u64,
}

/// Times `ds_matmul` for each configuration: `warmup` untimed runs, then
/// `repeats` timed runs on a monotonic clock.
pub fn bench_matmul(
    f: &DSFactorization,
    x: &DenseMatrix,
    configs: &[KernelConfig],
    repeats: usize,
    warmup: usize,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let (_, count) = ds_matmul_counted(f, x)?;
    let macs = count.total();
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        for _ in 0..warmup {
            ds_matmul(f, x, cfg)?;
        }
        let mut samples = Vec::with_capacity(repeats);
        let mut last = None;
        for _ in 0..repeats {
            let t0 = Instant::now();
            let out = ds_matmul(f, x, cfg)?;
            samples.push(t0.elapsed().as_nanos() as u64);
            last = Some(out);
        }
        let mut sorted = samples.clone();
        sorted.sort_unstable();
        let median = sorted[(sorted.len() - 1) / 2];
        rows.push(BenchRow {
            config: *cfg,
            time_ns_min: sorted[0],
            time_ns_median: median,
            macs,
            macs_per_sec: macs as f64 / (median.max(1) as f64 * 1e-9),
            checksum: checksum(&last.expect("repeats >= 1")),
            samples_ns: samples,
        });
    }
    Ok(rows)
}

/// CSV columns: `config, tile_p, tile_q, time_ns_min, time_ns_median, macs, macs_per_sec`.
pub fn write_bench_csv(rows: &[BenchRow], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "config",
        "tile_p",
        "tile_q",
        "time_ns_min",
        "time_ns_median",
        "macs",
        "macs_per_sec",
    ])?;
    for r in rows {
        w.write_record([
            r.config.label(),
            r.config.tile_p.to_string(),
            r.config.tile_q.to_string(),
            r.time_ns_min.to_string(),
            r.time_ns_median.to_string(),
            r.macs.to_string(),
            r.macs_per_sec.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
