//! Dense-sparse block factorization of weight matrices.
//!
//! A weight matrix `W (M × N)` is cut into column blocks of width `B` and each
//! block is approximated as `S_i · D_i`: a small dense dictionary `D_i` of `K`
//! atoms and a coefficient matrix `S_i` with exactly `S` nonzeros per row.
//!
//! - [`matrix`], [`io`], [`rng`]: dense matrices, BSM files, seeded randomness
//! - [`omp`]: orthogonal matching pursuit sparse coding
//! - [`ksvd`]: K-SVD dictionary learning and the truncated-SVD baseline
//! - [`dsfactor`]: whole-matrix factorization, reconstruction, DSF files
//! - [`planner`]: compression, flop and cache-intensity accounting
//! - [`kernel`]: reference and cache-blocked factored matmul
//! - [`stf`]: straight-through factorizer training on a toy transformer block

pub mod dsfactor;
pub mod error;
pub mod io;
pub mod kernel;
pub mod ksvd;
pub mod matrix;
pub mod omp;
pub mod planner;
pub mod rng;
pub mod stf;

pub use dsfactor::{
    decode_dsf, deserialize_dsf, encode_dsf, error_curve, factorize, reconstruct, serialize_dsf,
    BlockPlan, CurveMethod, CurvePoint, DSFactorization,
};
pub use error::{Error, ErrorKind, Result};
pub use io::{read_bsm, write_bsm};
pub use kernel::{ds_matmul, sparse_stage, KernelConfig, KernelMode};
pub use ksvd::{ksvd_factor, lowrank_bytes, lowrank_factor, BlockFactor, KsvdConfig};
pub use matrix::{frobenius_error, matmul_dense, random_heavy_tailed, DenseMatrix};
pub use omp::{omp_encode_block, omp_encode_row, SparseCoefficients, SparseRow};
pub use planner::{compression_report, flops_count, optimal_tile, CacheModel, CompressionReport, TilePlan};
pub use rng::Rng;
