//! One attention block plus FFN with hand-derived gradients.
//!
//! Tokens are rows of `X (T × d)`. Weights are stored `out × in`, so a linear
//! map is `X · Wᵀ`; column blocks of a weight then line up with input
//! features, which is the layout the block factorization expects.
//!
//! ```text
//! Q, K, V = X·Wqᵀ, X·Wkᵀ, X·Wvᵀ          split into heads of width d/h
//! A_h     = softmax(Q_h·K_hᵀ / √(d/h))    row-wise
//! X1      = LN(X + concat_h(A_h·V_h)·Woᵀ)
//! X2      = LN(X1 + ReLU(X1·W1ᵀ + b1)·W2ᵀ + b2)
//! logits  = Wc · mean_rows(X2) + bc
//! ```
//!
//! LayerNorm has no affine parameters.

use crate::error::{Error, Result};
use crate::matrix::{matmul_dense, matmul_nt, matmul_tn, DenseMatrix};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

/// The six factorizable weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Weight {
    Query,
    Key,
    Value,
    Output,
    Ffn1,
    Ffn2,
}

impl Weight {
    pub const ALL: [Weight; 6] = [
        Weight::Query,
        Weight::Key,
        Weight::Value,
        Weight::Output,
        Weight::Ffn1,
        Weight::Ffn2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Weight::Query => "wq",
            Weight::Key => "wk",
            Weight::Value => "wv",
            Weight::Output => "wo",
            Weight::Ffn1 => "w1",
            Weight::Ffn2 => "w2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub seq: usize,
    pub classes: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            ffn: 64,
            seq: 8,
            classes: 4,
        }
    }
}

impl ToyDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn weight_shape(&self, w: Weight) -> (usize, usize) {
        match w {
            Weight::Ffn1 => (self.ffn, self.d),
            Weight::Ffn2 => (self.d, self.ffn),
            _ => (self.d, self.d),
        }
    }
}

/// All parameters. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
    pub wc: DenseMatrix,
    pub bc: Vec<f64>,
}

impl ToyParams {
    pub fn zeros(dims: &ToyDims) -> Self {
        let sq = |m, n| DenseMatrix::zeros(m, n);
        Self {
            wq: sq(dims.d, dims.d),
            wk: sq(dims.d, dims.d),
            wv: sq(dims.d, dims.d),
            wo: sq(dims.d, dims.d),
            w1: sq(dims.ffn, dims.d),
            b1: vec![0.0; dims.ffn],
            w2: sq(dims.d, dims.ffn),
            b2: vec![0.0; dims.d],
            wc: sq(dims.classes, dims.d),
            bc: vec![0.0; dims.classes],
        }
    }

    pub fn weight(&self, w: Weight) -> &DenseMatrix {
        match w {
            Weight::Query => &self.wq,
            Weight::Key => &self.wk,
            Weight::Value => &self.wv,
            Weight::Output => &self.wo,
            Weight::Ffn1 => &self.w1,
            Weight::Ffn2 => &self.w2,
        }
    }

    pub fn weight_mut(&mut self, w: Weight) -> &mut DenseMatrix {
        match w {
            Weight::Query => &mut self.wq,
            Weight::Key => &mut self.wk,
            Weight::Value => &mut self.wv,
            Weight::Output => &mut self.wo,
            Weight::Ffn1 => &mut self.w1,
            Weight::Ffn2 => &mut self.w2,
        }
    }

    /// Every parameter as a flat slice, in a fixed order.
    pub fn slices(&self) -> [&[f64]; 10] {
        [
            self.wq.data(),
            self.wk.data(),
            self.wv.data(),
            self.wo.data(),
            self.w1.data(),
            &self.b1,
            self.w2.data(),
            &self.b2,
            self.wc.data(),
            &self.bc,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.wq.data_mut(),
            self.wk.data_mut(),
            self.wv.data_mut(),
            self.wo.data_mut(),
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
            self.wc.data_mut(),
            &mut self.bc,
        ]
    }

    fn accumulate(&mut self, other: &Self, alpha: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += alpha * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x0: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    attn: Vec<DenseMatrix>,
    z: DenseMatrix,
    x1: DenseMatrix,
    inv_std1: Vec<f64>,
    pre: DenseMatrix,
    h: DenseMatrix,
    x2: DenseMatrix,
    inv_std2: Vec<f64>,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn attention(&self) -> &[DenseMatrix] {
        &self.attn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: ToyDims,
    pub params: ToyParams,
}

fn softmax_rows(s: &mut DenseMatrix) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise normalization to zero mean and unit variance.
fn layer_norm(x: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv.push(r);
    }
    (y, inv)
}

/// `dx = r · (dy − mean(dy) − y · mean(dy ⊙ y))` per row.
fn layer_norm_backward(y: &DenseMatrix, inv_std: &[f64], dy: &DenseMatrix) -> DenseMatrix {
    let n = y.cols() as f64;
    let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), dy.row(i));
        let mean_g = gr.iter().sum::<f64>() / n;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
        for ((o, &g), &yv) in dx.row_mut(i).iter_mut().zip(gr).zip(yr) {
            *o = inv_std[i] * (g - mean_g - yv * mean_gy);
        }
    }
    dx
}

fn add_bias(x: &mut DenseMatrix, b: &[f64]) {
    for i in 0..x.rows() {
        for (v, bb) in x.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn column_sums(x: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}

/// Cross-entropy of `logits` against `label` and its gradient in the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl ToyModel {
    /// Gaussian init scaled by `1/√fan_in`, zero biases.
    pub fn new(dims: ToyDims, rng: &mut Rng) -> Result<Self> {
        if dims.heads == 0 || dims.d % dims.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {} is not divisible into {} heads",
                dims.d, dims.heads
            )));
        }
        let mut params = ToyParams::zeros(&dims);
        let init = |m: usize, n: usize, rng: &mut Rng| {
            DenseMatrix::random_normal(m, n, rng).scale(1.0 / (n as f64).sqrt())
        };
        params.wq = init(dims.d, dims.d, rng);
        params.wk = init(dims.d, dims.d, rng);
        params.wv = init(dims.d, dims.d, rng);
        params.wo = init(dims.d, dims.d, rng);
        params.w1 = init(dims.ffn, dims.d, rng);
        params.w2 = init(dims.d, dims.ffn, rng);
        params.wc = init(dims.classes, dims.d, rng);
        Ok(Self { dims, params })
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.shape() != (self.dims.seq, self.dims.d) {
            return Err(Error::Dimension(format!(
                "toy input must be {}x{}, got {}x{}",
                self.dims.seq,
                self.dims.d,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let p = &self.params;
        let dh = self.dims.head_dim();
        let c = 1.0 / (dh as f64).sqrt();
        let q = matmul_nt(x, &p.wq)?;
        let k = matmul_nt(x, &p.wk)?;
        let v = matmul_nt(x, &p.wv)?;
        let mut attn = Vec::with_capacity(self.dims.heads);
        let mut heads = Vec::with_capacity(self.dims.heads);
        for h in 0..self.dims.heads {
            let cols = h * dh..(h + 1) * dh;
            let (qh, kh, vh) = (
                q.column_block(cols.clone()),
                k.column_block(cols.clone()),
                v.column_block(cols),
            );
            let mut a = matmul_nt(&qh, &kh)?.scale(c);
            softmax_rows(&mut a);
            heads.push(matmul_dense(&a, &vh)?);
            attn.push(a);
        }
        let z = DenseMatrix::hstack(&heads)?;
        let r1 = x.add(&matmul_nt(&z, &p.wo)?)?;
        let (x1, inv_std1) = layer_norm(&r1);
        let mut pre = matmul_nt(&x1, &p.w1)?;
        add_bias(&mut pre, &p.b1);
        let h = pre.map(|v| v.max(0.0));
        let mut f = matmul_nt(&h, &p.w2)?;
        add_bias(&mut f, &p.b2);
        let (x2, inv_std2) = layer_norm(&x1.add(&f)?);
        let t = self.dims.seq as f64;
        let pooled: Vec<f64> = column_sums(&x2).into_iter().map(|v| v / t).collect();
        let logits: Vec<f64> = (0..self.dims.classes)
            .map(|i| crate::matrix::dot(p.wc.row(i), &pooled) + p.bc[i])
            .collect();
        Ok(ForwardCache {
            x0: x.clone(),
            q,
            k,
            v,
            attn,
            z,
            x1,
            inv_std1,
            pre,
            h,
            x2,
            inv_std2,
            pooled,
            logits,
        })
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Parameter and input gradients given `dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Result<(ToyParams, DenseMatrix)> {
        if dlogits.len() != self.dims.classes {
            return Err(Error::Dimension("dlogits length differs from class count".into()));
        }
        let p = &self.params;
        let dims = &self.dims;
        let mut g = ToyParams::zeros(dims);
        let dh = dims.head_dim();
        let c = 1.0 / (dh as f64).sqrt();

        g.bc = dlogits.to_vec();
        g.wc = DenseMatrix::from_fn(dims.classes, dims.d, |i, j| dlogits[i] * cache.pooled[j]);
        let t = dims.seq as f64;
        let dpool: Vec<f64> = (0..dims.d)
            .map(|j| (0..dims.classes).map(|i| p.wc.get(i, j) * dlogits[i]).sum::<f64>() / t)
            .collect();
        let dx2 = DenseMatrix::from_fn(dims.seq, dims.d, |_, j| dpool[j]);
        let dr2 = layer_norm_backward(&cache.x2, &cache.inv_std2, &dx2);

        // FFN
        g.w2 = matmul_tn(&dr2, &cache.h)?;
        g.b2 = column_sums(&dr2);
        let mut dpre = matmul_dense(&dr2, &p.w2)?;
        for (d, &pre) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
        g.w1 = matmul_tn(&dpre, &cache.x1)?;
        g.b1 = column_sums(&dpre);
        let dx1 = dr2.add(&matmul_dense(&dpre, &p.w1)?)?;
        let dr1 = layer_norm_backward(&cache.x1, &cache.inv_std1, &dx1);

        // attention
        g.wo = matmul_tn(&dr1, &cache.z)?;
        let dz = matmul_dense(&dr1, &p.wo)?;
        let mut dq = DenseMatrix::zeros(dims.seq, dims.d);
        let mut dk = DenseMatrix::zeros(dims.seq, dims.d);
        let mut dv = DenseMatrix::zeros(dims.seq, dims.d);
        for h in 0..dims.heads {
            let cols = h * dh..(h + 1) * dh;
            let a = &cache.attn[h];
            let dzh = dz.column_block(cols.clone());
            let vh = cache.v.column_block(cols.clone());
            let da = matmul_nt(&dzh, &vh)?;
            dv.set_column_block(h * dh, &matmul_tn(a, &dzh)?);
            // softmax backward, then the 1/√dh scale
            let mut ds = DenseMatrix::zeros(dims.seq, dims.seq);
            for i in 0..dims.seq {
                let inner = crate::matrix::dot(a.row(i), da.row(i));
                for j in 0..dims.seq {
                    ds.set(i, j, c * a.get(i, j) * (da.get(i, j) - inner));
                }
            }
            let kh = cache.k.column_block(cols.clone());
            let qh = cache.q.column_block(cols);
            dq.set_column_block(h * dh, &matmul_dense(&ds, &kh)?);
            dk.set_column_block(h * dh, &matmul_tn(&ds, &qh)?);
        }
        g.wq = matmul_tn(&dq, &cache.x0)?;
        g.wk = matmul_tn(&dk, &cache.x0)?;
        g.wv = matmul_tn(&dv, &cache.x0)?;
        let mut dx0 = dr1;
        for (dm, w) in [(&dq, &p.wq), (&dk, &p.wk), (&dv, &p.wv)] {
            dx0 = dx0.add(&matmul_dense(dm, w)?)?;
        }
        Ok((g, dx0))
    }

    /// Mean cross-entropy over a batch, accuracy, and mean parameter gradient.
    pub fn loss_and_grad(&self, batch: &[super::Sample]) -> Result<(f64, f64, ToyParams)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut grad = ToyParams::zeros(&self.dims);
        let mut loss = 0.0;
        let mut correct = 0usize;
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            let cache = self.forward(&sample.x)?;
            let (l, dl) = cross_entropy(&cache.logits, sample.label);
            loss += l;
            if argmax(&cache.logits) == sample.label {
                correct += 1;
            }
            let (g, _) = self.backward(&cache, &dl)?;
            grad.accumulate(&g, scale);
        }
        Ok((loss * scale, correct as f64 * scale, grad))
    }

    /// Mean loss and accuracy without gradients.
    pub fn evaluate(&self, data: &[super::Sample]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for sample in data {
            let logits = self.logits(&sample.x)?;
            loss += cross_entropy(&logits, sample.label).0;
            if argmax(&logits) == sample.label {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> ToyModel {
        ToyModel::new(ToyDims::default(), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = model(1);
        let x = DenseMatrix::random_normal(8, 32, &mut Rng::new(2));
        let cache = m.forward(&x).unwrap();
        for a in cache.attention() {
            for i in 0..a.rows() {
                let sum: f64 = a.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert!(cache.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_input_gives_uniform_attention() {
        let m = model(3);
        let cache = m.forward(&DenseMatrix::zeros(8, 32)).unwrap();
        for a in cache.attention() {
            assert!(a.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        }
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(model(4).forward(&DenseMatrix::zeros(7, 32)).is_err());
        let dims = ToyDims { heads: 3, ..ToyDims::default() };
        assert!(ToyModel::new(dims, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = cross_entropy(&[1.0, 2.0, -0.5, 0.0], 1);
        assert!(loss > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let m = model(5);
        let x = DenseMatrix::random_normal(8, 32, &mut Rng::new(6));
        let cache = m.forward(&x).unwrap();
        let (_, dl) = cross_entropy(&cache.logits, 2);
        let (_, dx) = m.backward(&cache, &dl).unwrap();
        let h = 1e-6;
        for &(i, j) in &[(0, 0), (3, 17), (7, 31)] {
            let mut xp = x.clone();
            xp.set(i, j, x.get(i, j) + h);
            let mut xm = x.clone();
            xm.set(i, j, x.get(i, j) - h);
            let lp = cross_entropy(&m.logits(&xp).unwrap(), 2).0;
            let lm = cross_entropy(&m.logits(&xm).unwrap(), 2).0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx.get(i, j)).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", dx.get(i, j));
        }
    }
}
