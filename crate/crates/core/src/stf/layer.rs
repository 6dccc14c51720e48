//! Straight-through factorizer for one weight matrix.
//!
//! Forward: re-derive every block's sparse codes by OMP against the current
//! dictionary (holding the latent weight and dictionary fixed) and return the
//! effective weight `[S_1·D_1, …]`. Backward: pass the upstream gradient to the
//! latent weight unchanged and move each dictionary one gradient step on
//! `½‖W_i − S_i·D_i‖²`, whose gradient is `S_iᵀ(S_i·D_i − W_i)`. The codes get
//! no gradient.

use crate::dsfactor::{BlockPlan, DSFactorization};
use crate::error::{Error, Result};
use crate::matrix::{matmul_dense, matmul_tn, DenseMatrix};
use crate::omp::{omp_encode_block, SparseCoefficients};

/// Step rule for the dictionary update `D ← D − step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictionaryStep {
    /// Raw step `lr · ∇D`.
    pub lr: f64,
    /// When set, the step norm is clipped to `max_ratio · ‖W_i‖_F`.
    pub max_ratio: Option<f64>,
}

impl DictionaryStep {
    pub fn fixed(lr: f64) -> Self {
        Self { lr, max_ratio: None }
    }
}

impl Default for DictionaryStep {
    fn default() -> Self {
        Self {
            lr: 1.0,
            max_ratio: Some(1e-2),
        }
    }
}

/// `S_iᵀ(S_i·D_i − W_i)`, the gradient of `½‖W_i − S_i·D_i‖²` in `D_i`.
pub fn dictionary_gradient(
    coeffs: &SparseCoefficients,
    dictionary: &DenseMatrix,
    w_block: &DenseMatrix,
) -> Result<DenseMatrix> {
    let resid = coeffs.apply(dictionary)?.sub(w_block)?;
    matmul_tn(&coeffs.to_dense(), &resid)
}

#[derive(Debug, Clone)]
pub struct StfLayer {
    pub w_latent: DenseMatrix,
    pub dictionaries: Vec<DenseMatrix>,
    pub plan: BlockPlan,
    pub step: DictionaryStep,
    /// Codes are re-derived on every `refactor_stride`-th forward call.
    pub refactor_stride: usize,
    codes: Option<Vec<SparseCoefficients>>,
    forward_calls: usize,
}

impl StfLayer {
    pub fn new(
        w_latent: DenseMatrix,
        dictionaries: Vec<DenseMatrix>,
        plan: BlockPlan,
        step: DictionaryStep,
        refactor_stride: usize,
    ) -> Result<Self> {
        let (m, n) = w_latent.shape();
        plan.validate(m, n)?;
        if dictionaries.len() != plan.blocks(n) {
            return Err(Error::Dimension(format!(
                "expected {} dictionaries, got {}",
                plan.blocks(n),
                dictionaries.len()
            )));
        }
        if dictionaries.iter().any(|d| d.shape() != (plan.k, plan.b)) {
            return Err(Error::Dimension("every dictionary must be K x B".into()));
        }
        if refactor_stride == 0 {
            return Err(Error::InvalidArgument("refactor_stride must be at least 1".into()));
        }
        Ok(Self {
            w_latent,
            dictionaries,
            plan,
            step,
            refactor_stride,
            codes: None,
            forward_calls: 0,
        })
    }

    /// Starts from a finished factorization: latent weight `w`, dictionaries
    /// taken from `f`.
    pub fn from_factorization(
        w: DenseMatrix,
        f: &DSFactorization,
        step: DictionaryStep,
        refactor_stride: usize,
    ) -> Result<Self> {
        let dicts = f.blocks.iter().map(|b| b.dictionary.clone()).collect();
        Self::new(w, dicts, f.plan, step, refactor_stride)
    }

    fn block(&self, i: usize) -> DenseMatrix {
        let b = self.plan.b;
        self.w_latent.column_block(i * b..(i + 1) * b)
    }

    /// Fresh OMP codes for the current latent weight, without touching the
    /// cache.
    pub fn encode(&self) -> Result<Vec<SparseCoefficients>> {
        (0..self.dictionaries.len())
            .map(|i| omp_encode_block(&self.block(i), &self.dictionaries[i], self.plan.s))
            .collect()
    }

    fn assemble(&self, codes: &[SparseCoefficients]) -> Result<DenseMatrix> {
        let parts: Result<Vec<DenseMatrix>> = codes
            .iter()
            .zip(&self.dictionaries)
            .map(|(c, d)| c.apply(d))
            .collect();
        DenseMatrix::hstack(&parts?)
    }

    /// Effective weight from fresh codes; does not change layer state.
    pub fn preview(&self) -> Result<DenseMatrix> {
        self.assemble(&self.encode()?)
    }

    pub fn forward(&mut self) -> Result<DenseMatrix> {
        if self.codes.is_none() || self.forward_calls % self.refactor_stride == 0 {
            self.codes = Some(self.encode()?);
        }
        self.forward_calls += 1;
        self.assemble(self.codes.as_deref().expect("codes set above"))
    }

    /// Returns the latent-weight gradient (the upstream gradient itself) and
    /// applies one dictionary step per block using the cached codes.
    pub fn backward(&mut self, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        if upstream.shape() != self.w_latent.shape() {
            return Err(Error::Dimension("upstream gradient shape differs from W".into()));
        }
        let codes = self
            .codes
            .take()
            .ok_or_else(|| Error::InvalidArgument("backward called before forward".into()))?;
        for (i, c) in codes.iter().enumerate() {
            let w_i = self.block(i);
            let grad = dictionary_gradient(c, &self.dictionaries[i], &w_i)?;
            let mut scale = self.step.lr;
            if let Some(ratio) = self.step.max_ratio {
                let step_norm = scale * grad.frobenius_norm();
                let cap = ratio * w_i.frobenius_norm();
                if step_norm > cap && step_norm > 0.0 {
                    scale *= cap / step_norm;
                }
            }
            if scale != 0.0 {
                self.dictionaries[i].axpy(-scale, &grad)?;
            }
        }
        self.codes = Some(codes);
        Ok(upstream.clone())
    }

    pub fn codes(&self) -> Option<&[SparseCoefficients]> {
        self.codes.as_deref()
    }

    /// Mean over blocks of `‖W_i − S_i·D_i‖ / ‖W_i‖` using fresh codes.
    pub fn mean_block_error(&self) -> Result<f64> {
        let codes = self.encode()?;
        mean_block_error(&self.w_latent, &codes, &self.dictionaries, self.plan.b)
    }
}

pub(crate) fn mean_block_error(
    w: &DenseMatrix,
    codes: &[SparseCoefficients],
    dicts: &[DenseMatrix],
    b: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, (c, d)) in codes.iter().zip(dicts).enumerate() {
        let w_i = w.column_block(i * b..(i + 1) * b);
        let norm = w_i.frobenius_norm();
        let diff = c.apply(d)?.sub(&w_i)?.frobenius_norm();
        total += if norm > 0.0 { diff / norm } else { diff };
    }
    Ok(total / codes.len() as f64)
}

/// `S · D` for a dense coefficient block; used by tests and the fixed-pattern
/// schedule.
pub fn dense_product(coeffs: &SparseCoefficients, dictionary: &DenseMatrix) -> Result<DenseMatrix> {
    matmul_dense(&coeffs.to_dense(), dictionary)
}
