//! Training schedules: dense fine-tuning (FT), FT then factorize then
//! fine-tune the factors with a frozen sparsity pattern (FT-F-FT), and FT then
//! factorize then straight-through refinement (FT-F-STF).

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::dsfactor::{factorize, BlockPlan};
use crate::error::{Error, Result};
use crate::io::write_atomically;
use crate::ksvd::KsvdConfig;
use crate::matrix::{matmul_tn, DenseMatrix};
use crate::omp::SparseCoefficients;
use crate::rng::Rng;

use super::adam::{AdamConfig, AdamState};
use super::layer::{mean_block_error, DictionaryStep, StfLayer};
use super::toy::{ToyModel, ToyParams, Weight};
use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Ft,
    FtFFt,
    FtFStf,
}

impl Schedule {
    pub fn label(self) -> &'static str {
        match self {
            Schedule::Ft => "ft",
            Schedule::FtFFt => "ftfft",
            Schedule::FtFStf => "ftfstf",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ft" => Ok(Schedule::Ft),
            "ftfft" => Ok(Schedule::FtFFt),
            "ftfstf" => Ok(Schedule::FtFStf),
            _ => Err(Error::InvalidArgument(format!(
                "unknown schedule '{s}' (expected ft, ftfft or ftfstf)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub plan: BlockPlan,
    /// Epochs of dense training before factorization.
    pub dense_epochs: usize,
    /// Epochs after factorization (dense epochs for plain FT).
    pub refine_epochs: usize,
    pub batch_size: usize,
    pub dense_adam: AdamConfig,
    pub refine_adam: AdamConfig,
    pub ksvd_iters: usize,
    pub dictionary_step: DictionaryStep,
    pub refactor_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::FtFStf,
            plan: BlockPlan::new(8, 16, 2),
            dense_epochs: 10,
            refine_epochs: 5,
            batch_size: 32,
            dense_adam: AdamConfig::default(),
            refine_adam: AdamConfig::default(),
            ksvd_iters: 30,
            dictionary_step: DictionaryStep::default(),
            refactor_stride: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.ksvd_iters == 0 {
            return Err(Error::InvalidArgument("ksvd_iters must be at least 1".into()));
        }
        if self.refactor_stride == 0 {
            return Err(Error::InvalidArgument("refactor_stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub stage: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean over factorized weights of the mean relative block error; `None`
    /// while weights are dense.
    pub mean_block_recon_err: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    /// Model carrying the final effective weights.
    pub model: ToyModel,
}

impl TrainOutcome {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("at least one metrics row")
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomically(path, |w| write_metrics(w, rows))
}

/// Writes metrics rows as CSV to any sink (stdout, buffers).
pub fn write_metrics(out: &mut dyn Write, rows: &[MetricsRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(["stage", "epoch", "step", "loss", "accuracy", "mean_block_recon_err"])?;
    for r in rows {
        csv.write_record([
            r.stage.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.mean_block_recon_err.map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

fn batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.sample_without_replacement(n, n);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn gather(data: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Per-tensor Adam state matching [`ToyParams::slices`].
struct ParamAdam(Vec<AdamState>);

impl ParamAdam {
    fn new(p: &ToyParams) -> Self {
        Self(p.slices().iter().map(|s| AdamState::new(s.len())).collect())
    }

    /// Steps every tensor whose position is not in `skip`.
    fn step(&mut self, cfg: &AdamConfig, p: &mut ToyParams, g: &ToyParams, skip: &[usize]) {
        for (i, ((st, dst), src)) in self
            .0
            .iter_mut()
            .zip(p.slices_mut())
            .zip(g.slices())
            .enumerate()
        {
            if !skip.contains(&i) {
                st.step(cfg, dst, src);
            }
        }
    }
}

/// Positions of the six factorizable weights in [`ToyParams::slices`].
const FACTORED_SLOTS: [usize; 6] = [0, 1, 2, 3, 4, 6];

/// Stage 1: dense training. `rows` get one entry per epoch.
pub fn train_dense(
    model: &ToyModel,
    data: &[Sample],
    epochs: usize,
    batch_size: usize,
    adam: &AdamConfig,
    rng: &Rng,
) -> Result<(ToyModel, Vec<MetricsRow>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut model = model.clone();
    let mut opt = ParamAdam::new(&model.params);
    let mut rows = Vec::new();
    let mut step = 0;
    for epoch in 1..=epochs {
        let mut order_rng = rng.fork(epoch as u64);
        for idx in batches(data.len(), batch_size, &mut order_rng) {
            let (_, _, g) = model.loss_and_grad(&gather(data, &idx))?;
            opt.step(adam, &mut model.params, &g, &[]);
            step += 1;
        }
        let (loss, accuracy) = model.evaluate(data)?;
        log::debug!("dense epoch {epoch}: loss {loss:.4} acc {accuracy:.3}");
        rows.push(MetricsRow {
            stage: "dense",
            epoch,
            step,
            loss,
            accuracy,
            mean_block_recon_err: None,
        });
    }
    Ok((model, rows))
}

/// Frozen-pattern factors for one weight: the codes' values and the
/// dictionaries are trainable, the support is not.
struct FixedFactor {
    codes: Vec<SparseCoefficients>,
    dicts: Vec<DenseMatrix>,
    reference: DenseMatrix,
    value_opt: Vec<AdamState>,
    dict_opt: Vec<AdamState>,
    b: usize,
}

impl FixedFactor {
    fn effective(&self) -> Result<DenseMatrix> {
        let parts: Result<Vec<_>> = self.codes.iter().zip(&self.dicts).map(|(c, d)| c.apply(d)).collect();
        DenseMatrix::hstack(&parts?)
    }

    fn step(&mut self, cfg: &AdamConfig, grad: &DenseMatrix) -> Result<()> {
        for i in 0..self.codes.len() {
            let g_i = grad.column_block(i * self.b..(i + 1) * self.b);
            let codes = &self.codes[i];
            let dict = &self.dicts[i];
            let g_dict = matmul_tn(&codes.to_dense(), &g_i)?;
            let mut g_vals = Vec::with_capacity(codes.values().len());
            for j in 0..codes.m() {
                for &a in codes.row_indices(j) {
                    g_vals.push(crate::matrix::dot(g_i.row(j), dict.row(a as usize)));
                }
            }
            self.value_opt[i].step(cfg, self.codes[i].values_mut(), &g_vals);
            self.dict_opt[i].step(cfg, self.dicts[i].data_mut(), g_dict.data());
        }
        Ok(())
    }

    fn recon_err(&self) -> Result<f64> {
        mean_block_error(&self.reference, &self.codes, &self.dicts, self.b)
    }
}

enum Refiner {
    Fixed(Vec<FixedFactor>),
    Stf(Vec<StfLayer>),
}

impl Refiner {
    fn recon_err(&self) -> Result<f64> {
        let errs: Result<Vec<f64>> = match self {
            Refiner::Fixed(f) => f.iter().map(|x| x.recon_err()).collect(),
            Refiner::Stf(l) => l.iter().map(|x| x.mean_block_error()).collect(),
        };
        let errs = errs?;
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }

    /// Model with effective weights from fresh codes (STF) or current factors.
    fn snapshot(&self, base: &ToyModel) -> Result<ToyModel> {
        let mut m = base.clone();
        for (slot, w) in Weight::ALL.iter().enumerate() {
            *m.params.weight_mut(*w) = match self {
                Refiner::Fixed(f) => f[slot].effective()?,
                Refiner::Stf(l) => l[slot].preview()?,
            };
        }
        Ok(m)
    }
}

/// Stages 2 and 3, starting from a dense-trained model. `step0` offsets the
/// step column so it continues the dense stage's count.
pub fn run_after_dense(
    dense: &ToyModel,
    data: &[Sample],
    cfg: &TrainConfig,
    step0: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rng = Rng::new(cfg.seed);
    if cfg.schedule == Schedule::Ft {
        let (model, mut rows) = train_dense(
            dense,
            data,
            cfg.refine_epochs,
            cfg.batch_size,
            &cfg.refine_adam,
            &rng.fork(2),
        )?;
        for r in &mut rows {
            r.step += step0;
            r.stage = "finetune";
        }
        return Ok(TrainOutcome { rows, model });
    }

    // stage 2: factorize all six weights
    let factor_rng = rng.fork(1);
    let mut refiner_fixed = Vec::new();
    let mut refiner_stf = Vec::new();
    for (slot, w) in Weight::ALL.iter().enumerate() {
        let weight = dense.params.weight(*w);
        cfg.plan.validate(weight.rows(), weight.cols())?;
        let kcfg = KsvdConfig {
            max_iters: cfg.ksvd_iters,
            rng: factor_rng.fork(slot as u64),
            ..KsvdConfig::default()
        };
        let f = factorize(weight, cfg.plan, &kcfg)?;
        match cfg.schedule {
            Schedule::FtFFt => refiner_fixed.push(FixedFactor {
                codes: f.blocks.iter().map(|b| b.coeffs.clone()).collect(),
                value_opt: f.blocks.iter().map(|b| AdamState::new(b.coeffs.values().len())).collect(),
                dict_opt: f.blocks.iter().map(|b| AdamState::new(b.dictionary.data().len())).collect(),
                dicts: f.blocks.iter().map(|b| b.dictionary.clone()).collect(),
                reference: weight.clone(),
                b: cfg.plan.b,
            }),
            _ => {
                // the F-stage snapshot uses the K-SVD codes for both schedules
                refiner_fixed.push(FixedFactor {
                    codes: f.blocks.iter().map(|b| b.coeffs.clone()).collect(),
                    value_opt: Vec::new(),
                    dict_opt: Vec::new(),
                    dicts: f.blocks.iter().map(|b| b.dictionary.clone()).collect(),
                    reference: weight.clone(),
                    b: cfg.plan.b,
                });
                refiner_stf.push(StfLayer::from_factorization(
                    weight.clone(),
                    &f,
                    cfg.dictionary_step,
                    cfg.refactor_stride,
                )?);
            }
        }
    }
    let fixed = Refiner::Fixed(refiner_fixed);
    let factored = fixed.snapshot(dense)?;
    let (loss, accuracy) = factored.evaluate(data)?;
    let mut rows = vec![MetricsRow {
        stage: "factorize",
        epoch: 0,
        step: step0,
        loss,
        accuracy,
        mean_block_recon_err: Some(fixed.recon_err()?),
    }];
    let mut refiner = match cfg.schedule {
        Schedule::FtFFt => fixed,
        _ => Refiner::Stf(refiner_stf),
    };
    let stage = match cfg.schedule {
        Schedule::FtFFt => "ft",
        _ => "stf",
    };

    // stage 3
    let mut model = factored;
    let mut opt = ParamAdam::new(&model.params);
    let mut latent_opt: Vec<AdamState> = Weight::ALL
        .iter()
        .map(|w| AdamState::new(dense.params.weight(*w).data().len()))
        .collect();
    let mut step = step0;
    let order_rng = rng.fork(3);
    for epoch in 1..=cfg.refine_epochs {
        let mut erng = order_rng.fork(epoch as u64);
        for idx in batches(data.len(), cfg.batch_size, &mut erng) {
            for (slot, w) in Weight::ALL.iter().enumerate() {
                *model.params.weight_mut(*w) = match &mut refiner {
                    Refiner::Fixed(f) => f[slot].effective()?,
                    Refiner::Stf(l) => l[slot].forward()?,
                };
            }
            let (_, _, g) = model.loss_and_grad(&gather(data, &idx))?;
            opt.step(&cfg.refine_adam, &mut model.params, &g, &FACTORED_SLOTS);
            for (slot, w) in Weight::ALL.iter().enumerate() {
                let gw = g.weight(*w);
                match &mut refiner {
                    Refiner::Fixed(f) => f[slot].step(&cfg.refine_adam, gw)?,
                    Refiner::Stf(l) => {
                        let g_latent = l[slot].backward(gw)?;
                        latent_opt[slot].step(
                            &cfg.refine_adam,
                            l[slot].w_latent.data_mut(),
                            g_latent.data(),
                        );
                    }
                }
            }
            step += 1;
        }
        let snap = refiner.snapshot(&model)?;
        let (loss, accuracy) = snap.evaluate(data)?;
        log::debug!("{stage} epoch {epoch}: loss {loss:.4} acc {accuracy:.3}");
        rows.push(MetricsRow {
            stage,
            epoch,
            step,
            loss,
            accuracy,
            mean_block_recon_err: Some(refiner.recon_err()?),
        });
    }
    let model = if cfg.refine_epochs == 0 { model } else { refiner.snapshot(&model)? };
    Ok(TrainOutcome { rows, model })
}

/// Full schedule from an untrained model.
pub fn run_schedule(model: &ToyModel, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rng = Rng::new(cfg.seed);
    let (dense, mut rows) = train_dense(
        model,
        data,
        cfg.dense_epochs,
        cfg.batch_size,
        &cfg.dense_adam,
        &rng.fork(0),
    )?;
    let step0 = rows.last().map_or(0, |r| r.step);
    let rest = run_after_dense(&dense, data, cfg, step0)?;
    rows.extend(rest.rows);
    Ok(TrainOutcome {
        rows,
        model: rest.model,
    })
}
