//! `dsfactor`: plan, factorize, reconstruct and benchmark dense-sparse
//! factorizations, and run the training demo.
//!
//! Exit codes: 0 success, 1 invalid arguments or plan, 2 file or format
//! errors, 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsfactor_core::dsfactor::{write_curve_csv, RoundedPlan};
use dsfactor_core::io::write_atomically;
use dsfactor_core::kernel::{bench_matmul, write_bench_csv};
use dsfactor_core::planner::compression_report;
use dsfactor_core::stf::{
    run_schedule, write_metrics, write_metrics_csv, AdamConfig, Schedule, SyntheticTask, ToyDims, ToyModel,
    TrainConfig,
};
use dsfactor_core::{
    deserialize_dsf, ds_matmul, error_curve, factorize, frobenius_error, optimal_tile, random_heavy_tailed,
    read_bsm, reconstruct, serialize_dsf, write_bsm, BlockPlan, CacheModel, Error, ErrorKind, KernelConfig,
    KsvdConfig, Result, Rng,
};

#[derive(Parser, Debug)]
#[command(name = "dsfactor", version, about = "Dense-sparse block factorization of weight matrices")]
struct Cli {
    /// Worker threads for parallel stages; 0 picks automatically.
    #[arg(long, global = true, env = "DSFACTOR_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compression, flop and cache-tile report for one (B, K, S) plan.
    Plan(PlanArgs),
    /// Write a random matrix with singular values i^-decay as a BSM file.
    Generate(GenerateArgs),
    /// Factorize a BSM matrix into a DSF file with K-SVD.
    Factorize(FactorizeArgs),
    /// Expand a DSF file back into a dense BSM matrix.
    Reconstruct(ReconstructArgs),
    /// Error vs bytes for dense-sparse plans and low-rank baselines, as CSV.
    BenchError(BenchErrorArgs),
    /// Compute W·X from a DSF file without densifying W.
    Matmul(MatmulArgs),
    /// Time the factored product for several tile configurations, as CSV.
    BenchMatmul(BenchMatmulArgs),
    /// Train the toy attention block under one schedule and log metrics as CSV.
    TrainDemo(TrainDemoArgs),
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Rows of W.
    #[arg(long)]
    m: usize,
    /// Columns of W.
    #[arg(long)]
    n: usize,
    /// Block width B.
    #[arg(long)]
    b: usize,
    /// Dictionary ratio; K = round(gamma * M).
    #[arg(long)]
    gamma: f64,
    /// Sparsity ratio; S = round(delta * B).
    #[arg(long)]
    delta: f64,
    /// Fast-memory size in bytes; enables the tile report.
    #[arg(long)]
    cache_bytes: Option<usize>,
    /// Bytes per element for the tile report.
    #[arg(long, default_value_t = 4, requires = "cache_bytes")]
    elem_bytes: usize,
    /// Also write the report as a one-row CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    /// Spectrum decay exponent in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output BSM file.
    #[arg(long, short)]
    output: PathBuf,
}

/// Plan given either directly as (K, S) or as (gamma, delta) ratios.
#[derive(Args, Debug)]
struct PlanSpec {
    /// Block width B.
    #[arg(long)]
    b: usize,
    /// Atoms per block dictionary.
    #[arg(long, conflicts_with = "gamma", required_unless_present = "gamma")]
    k: Option<usize>,
    /// Nonzeros per coefficient row.
    #[arg(long, conflicts_with = "delta", required_unless_present = "delta")]
    s: Option<usize>,
    /// K = round(gamma * M), alternative to --k.
    #[arg(long)]
    gamma: Option<f64>,
    /// S = round(delta * B), alternative to --s.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args, Debug)]
struct KsvdArgs {
    /// K-SVD iteration cap.
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    /// Stop when the relative objective decrease falls below this.
    #[arg(long, default_value_t = 1e-5)]
    rel_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl KsvdArgs {
    fn config(&self) -> KsvdConfig {
        KsvdConfig {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            ..KsvdConfig::with_seed(self.seed)
        }
    }
}

#[derive(Args, Debug)]
struct FactorizeArgs {
    /// Input BSM matrix W.
    #[arg(long, short)]
    input: PathBuf,
    /// Output DSF file.
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    plan: PlanSpec,
    #[command(flatten)]
    ksvd: KsvdArgs,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Input DSF file.
    #[arg(long, short)]
    input: PathBuf,
    /// Output BSM file.
    #[arg(long, short)]
    output: PathBuf,
    /// Print the relative error against this BSM matrix.
    #[arg(long)]
    compare: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchErrorArgs {
    /// Input BSM matrix.
    #[arg(long, short)]
    input: PathBuf,
    /// Comma-separated plans as b:k:s, e.g. 64:192:12,64:128:8.
    #[arg(long, value_delimiter = ',', value_parser = parse_plan)]
    plans: Vec<BlockPlan>,
    /// Comma-separated low-rank baseline ranks.
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<usize>,
    /// Output CSV (method, bytes, cr, rel_error); stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    ksvd: KsvdArgs,
}

#[derive(Args, Debug)]
struct TileArgs {
    /// Tile rows P.
    #[arg(long, default_value_t = 64)]
    tile_p: usize,
    /// Tile columns Q.
    #[arg(long, default_value_t = 64)]
    tile_q: usize,
    /// Use the naive reference loop instead of the blocked kernel.
    #[arg(long)]
    reference: bool,
}

#[derive(Args, Debug)]
struct MatmulArgs {
    /// DSF factorization of W.
    #[arg(long)]
    factors: PathBuf,
    /// BSM input X (N × L).
    #[arg(long, short)]
    input: PathBuf,
    /// BSM output W·X.
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    tile: TileArgs,
}

#[derive(Args, Debug)]
struct BenchMatmulArgs {
    /// DSF factorization of W.
    #[arg(long)]
    factors: PathBuf,
    /// BSM input X (N × L).
    #[arg(long, short)]
    input: PathBuf,
    /// Comma-separated tiles as p:q; the reference loop is always included.
    #[arg(long, value_delimiter = ',', value_parser = parse_tile, default_value = "16:16,64:64")]
    tiles: Vec<(usize, usize)>,
    /// Also include the planner's tile for this cache size in bytes.
    #[arg(long)]
    cache_bytes: Option<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Output CSV; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainDemoArgs {
    /// ft, ftfft or ftfstf.
    #[arg(long, default_value = "ftfstf")]
    schedule: Schedule,
    #[arg(long, default_value_t = 8)]
    b: usize,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    dense_epochs: usize,
    #[arg(long, default_value_t = 10)]
    refine_epochs: usize,
    #[arg(long, default_value_t = 2048)]
    train_size: usize,
    /// Token noise of the synthetic task.
    #[arg(long, default_value_t = 0.6)]
    noise: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Adam learning rate for every stage.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Re-run OMP on every n-th forward pass.
    #[arg(long, default_value_t = 1)]
    refactor_stride: usize,
    /// Output CSV (stage, epoch, step, loss, accuracy, mean_block_recon_err); stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn parse_plan(s: &str) -> std::result::Result<BlockPlan, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected b:k:s, got '{s}'"));
    }
    let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}"));
    Ok(BlockPlan::new(num(parts[0])?, num(parts[1])?, num(parts[2])?))
}

fn parse_tile(s: &str) -> std::result::Result<(usize, usize), String> {
    let (p, q) = s.split_once(':').ok_or_else(|| format!("expected p:q, got '{s}'"))?;
    let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}"));
    Ok((num(p)?, num(q)?))
}

fn resolve_plan(spec: &PlanSpec, m: usize) -> Result<BlockPlan> {
    let RoundedPlan { plan, notes } = match (spec.gamma, spec.delta) {
        (None, None) => RoundedPlan {
            plan: BlockPlan::new(spec.b, spec.k.unwrap_or(0), spec.s.unwrap_or(0)),
            notes: Vec::new(),
        },
        (g, d) => {
            let gamma = g.unwrap_or(spec.k.unwrap_or(0) as f64 / m as f64);
            let delta = d.unwrap_or(spec.s.unwrap_or(0) as f64 / spec.b as f64);
            BlockPlan::from_ratios(m, spec.b, gamma, delta)?
        }
    };
    for note in notes {
        eprintln!("note: {note}");
    }
    Ok(plan)
}

/// Writes to `path` atomically, or to stdout.
fn emit(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => write_atomically(p, f),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let RoundedPlan { plan, notes } = BlockPlan::from_ratios(a.m, a.b, a.gamma, a.delta)?;
    for note in &notes {
        println!("note: {note}");
    }
    let r = compression_report(a.m, a.n, plan)?;
    println!("matrix        {} x {}", a.m, a.n);
    println!("plan          B={} K={} S={} ({} blocks)", plan.b, plan.k, plan.s, plan.blocks(a.n));
    println!("gamma, delta  {:.6}, {:.6}", plan.gamma(a.m), plan.delta());
    println!("dense bytes   {}", r.dense_bytes);
    println!("ds bytes      {:.1} (bit-packed indices), {} (u16 indices)", r.ds_bytes_packed, r.ds_bytes_file);
    println!("cr            {:.6} (closed form {:.6}, u16 file {:.6})", r.cr, r.cr_closed_form, r.cr_file);
    println!("compression   {:.3}x", r.inverse_cr);
    println!("flops ratio   {:.6}", r.flops_ratio);
    let tile = match a.cache_bytes {
        Some(cache_bytes) => {
            let t = optimal_tile(CacheModel {
                cache_bytes,
                element_bytes: a.elem_bytes,
                k: plan.k,
                s: plan.s,
            })?;
            println!("tile          P={} Q={} (load {} elements, intensity {:.4})", t.p, t.q, t.load, t.ci);
            Some(t)
        }
        None => None,
    };
    if let Some(path) = &a.csv {
        write_atomically(path, |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record([
                "m", "n", "b", "k", "s", "dense_bytes", "ds_bytes_packed", "ds_bytes_file", "cr", "cr_file",
                "flops_ratio", "tile_p", "tile_q", "tile_ci",
            ])?;
            let opt = |v: Option<String>| v.unwrap_or_default();
            csv.write_record([
                a.m.to_string(),
                a.n.to_string(),
                plan.b.to_string(),
                plan.k.to_string(),
                plan.s.to_string(),
                r.dense_bytes.to_string(),
                r.ds_bytes_packed.to_string(),
                r.ds_bytes_file.to_string(),
                r.cr.to_string(),
                r.cr_file.to_string(),
                r.flops_ratio.to_string(),
                opt(tile.map(|t| t.p.to_string())),
                opt(tile.map(|t| t.q.to_string())),
                opt(tile.map(|t| t.ci.to_string())),
            ])?;
            csv.flush()?;
            Ok(())
        })?;
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let w = random_heavy_tailed(a.rows, a.cols, a.decay, &mut Rng::new(a.seed))?;
    write_bsm(&w, &a.output)
}

fn cmd_factorize(a: &FactorizeArgs) -> Result<()> {
    let w = read_bsm(&a.input)?;
    let plan = resolve_plan(&a.plan, w.rows())?;
    plan.validate(w.rows(), w.cols())?;
    let f = factorize(&w, plan, &a.ksvd.config())?;
    let err = frobenius_error(&w, &reconstruct(&f)).unwrap_or(0.0);
    serialize_dsf(&f, &a.output)?;
    eprintln!("relative error {err:.6}");
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let f = deserialize_dsf(&a.input)?;
    let w = reconstruct(&f);
    if let Some(path) = &a.compare {
        let reference = read_bsm(path)?;
        println!("relative error {:.6}", frobenius_error(&reference, &w)?);
    }
    write_bsm(&w, &a.output)
}

fn cmd_bench_error(a: &BenchErrorArgs) -> Result<()> {
    let w = read_bsm(&a.input)?;
    for p in &a.plans {
        p.validate(w.rows(), w.cols())?;
    }
    let points = error_curve(&w, &a.plans, &a.ranks, &a.ksvd.config())?;
    emit(a.output.as_deref(), |out| write_curve_csv(&points, out))
}

fn cmd_matmul(a: &MatmulArgs) -> Result<()> {
    let f = deserialize_dsf(&a.factors)?;
    let x = read_bsm(&a.input)?;
    let cfg = if a.tile.reference {
        KernelConfig::reference()
    } else {
        KernelConfig::blocked(a.tile.tile_p, a.tile.tile_q)
    };
    let out = ds_matmul(&f, &x, &cfg)?;
    write_bsm(&out, &a.output)
}

fn cmd_bench_matmul(a: &BenchMatmulArgs) -> Result<()> {
    let f = deserialize_dsf(&a.factors)?;
    let x = read_bsm(&a.input)?;
    let mut configs = vec![KernelConfig::reference()];
    configs.extend(a.tiles.iter().map(|&(p, q)| KernelConfig::blocked(p, q)));
    if let Some(cache_bytes) = a.cache_bytes {
        let t = optimal_tile(CacheModel {
            cache_bytes,
            element_bytes: 8,
            k: f.plan.k,
            s: f.plan.s,
        })?;
        configs.push(KernelConfig::blocked(t.p, t.q));
    }
    let rows = bench_matmul(&f, &x, &configs, a.repeats, a.warmup)?;
    if rows.windows(2).any(|w| w[0].checksum != w[1].checksum) {
        return Err(Error::Numeric("kernel configurations disagree on the product".into()));
    }
    emit(a.output.as_deref(), |out| write_bench_csv(&rows, out))
}

fn cmd_train_demo(a: &TrainDemoArgs) -> Result<()> {
    let dims = ToyDims::default();
    let mut rng = Rng::new(a.seed);
    let task = SyntheticTask::new(dims.seq, dims.d, dims.classes, a.noise, &mut rng)?;
    let data = task.generate(a.train_size, &mut rng);
    let model = ToyModel::new(dims, &mut rng)?;
    let adam = AdamConfig {
        lr: a.lr,
        ..AdamConfig::default()
    };
    let cfg = TrainConfig {
        schedule: a.schedule,
        plan: BlockPlan::new(a.b, a.k, a.s),
        dense_epochs: a.dense_epochs,
        refine_epochs: a.refine_epochs,
        batch_size: a.batch_size,
        dense_adam: adam,
        refine_adam: adam,
        refactor_stride: a.refactor_stride,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if a.schedule != Schedule::Ft {
        for (m, n) in [(dims.d, dims.d), (dims.ffn, dims.d), (dims.d, dims.ffn)] {
            cfg.plan.validate(m, n)?;
        }
    }
    let out = run_schedule(&model, &data, &cfg)?;
    match &a.output {
        Some(p) => write_metrics_csv(p, &out.rows),
        None => emit(None, |w| write_metrics(w, &out.rows)),
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Factorize(a) => cmd_factorize(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::BenchError(a) => cmd_bench_error(a),
        Command::Matmul(a) => cmd_matmul(a),
        Command::BenchMatmul(a) => cmd_bench_matmul(a),
        Command::TrainDemo(a) => cmd_train_demo(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Io => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
