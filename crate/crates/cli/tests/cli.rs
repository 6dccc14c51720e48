use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsfactor_core::{error_curve, frobenius_error, random_heavy_tailed, read_bsm, BlockPlan, KsvdConfig, Rng};

fn dsfactor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsfactor"))
        .args(args)
        .env_remove("DSFACTOR_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dsfactor(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, rows: usize, cols: usize, seed: u64) -> PathBuf {
    let p = dir.join(name);
    ok(&[
        "generate",
        "--rows",
        &rows.to_string(),
        "--cols",
        &cols.to_string(),
        "--seed",
        &seed.to_string(),
        "-o",
        path_str(&p),
    ]);
    p
}

#[test]
fn plan_reports_the_quarter_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("plan.csv");
    let out = ok(&[
        "plan", "--m", "768", "--n", "768", "--b", "64", "--gamma", "0.25", "--delta", "0.1875", "--cache-bytes",
        "131072", "--csv", path_str(&csv),
    ]);
    assert!(out.contains("B=64 K=192 S=12"), "{out}");
    assert!(out.contains("cr            0.48"), "{out}");
    assert!(out.contains("tile          P="));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("m,n,b,k,s,"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..5], ["768", "768", "64", "192", "12"]);
    let cr: f64 = row[8].parse().unwrap();
    assert!((cr - 0.482).abs() < 5e-4);

    let out = ok(&["plan", "--m", "768", "--n", "768", "--b", "64", "--gamma", "0.25", "--delta", "0.25"]);
    assert!(out.contains("K=192 S=16"));
}

#[test]
fn plan_rounding_is_disclosed() {
    let out = ok(&["plan", "--m", "100", "--n", "64", "--b", "16", "--gamma", "0.333", "--delta", "0.1"]);
    assert!(out.contains("note: K = gamma*M"), "{out}");
    assert!(out.contains("note: S = delta*B"), "{out}");
}

#[test]
fn invalid_plans_exit_with_code_one() {
    let out = dsfactor(&["plan", "--m", "768", "--n", "768", "--b", "64", "--gamma", "0.25", "--delta", "1.0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("S < B"));
    let out = dsfactor(&["plan", "--m", "768"]);
    assert_eq!(out.status.code(), Some(1));
    let out = dsfactor(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_and_corrupt_files_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("out.bsm");
    let missing = dir.path().join("missing.dsf");
    let out = dsfactor(&["reconstruct", "-i", path_str(&missing), "-o", path_str(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
    let junk = dir.path().join("junk.dsf");
    std::fs::write(&junk, b"DSF1 not really").unwrap();
    let out = dsfactor(&["reconstruct", "-i", path_str(&junk), "-o", path_str(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_path.exists());
}

#[test]
fn failed_factorize_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate(dir.path(), "w.bsm", 32, 30, 1);
    let out_path = dir.path().join("w.dsf");
    let out = dsfactor(&["factorize", "-i", path_str(&w), "-o", path_str(&out_path), "--b", "8", "--k", "16", "--s", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N % B"));
    assert!(!out_path.exists());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn factorize_reconstruct_matches_the_error_curve() {
    let dir = tempfile::tempdir().unwrap();
    let w_path = generate(dir.path(), "w.bsm", 64, 64, 3);
    let dsf = dir.path().join("w.dsf");
    let back = dir.path().join("back.bsm");
    ok(&[
        "factorize", "-i", path_str(&w_path), "-o", path_str(&dsf), "--b", "16", "--k", "32", "--s", "4", "--seed", "5",
        "--max-iters", "10",
    ]);
    let out = ok(&["reconstruct", "-i", path_str(&dsf), "-o", path_str(&back), "--compare", path_str(&w_path)]);
    assert!(out.starts_with("relative error"));

    let w = read_bsm(&w_path).unwrap();
    let cli_err = frobenius_error(&w, &read_bsm(&back).unwrap()).unwrap();
    let cfg = KsvdConfig {
        max_iters: 10,
        ..KsvdConfig::with_seed(5)
    };
    let pts = error_curve(&w, &[BlockPlan::new(16, 32, 4)], &[], &cfg).unwrap();
    // the DSF file stores binary32 values and dictionaries
    assert!((cli_err - pts[0].rel_error).abs() < 1e-5, "{cli_err} vs {}", pts[0].rel_error);

    // the same flags give the same bytes
    let again = dir.path().join("again.dsf");
    ok(&[
        "factorize", "-i", path_str(&w_path), "-o", path_str(&again), "--b", "16", "--gamma", "0.5", "--delta", "0.25",
        "--seed", "5", "--max-iters", "10",
    ]);
    assert_eq!(std::fs::read(&dsf).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn generate_is_reproducible_and_heavy_tailed() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.bsm", 20, 12, 9);
    let b = generate(dir.path(), "b.bsm", 20, 12, 9);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let lib = random_heavy_tailed(20, 12, 0.5, &mut Rng::new(9)).unwrap();
    let cli = read_bsm(&a).unwrap();
    assert!(frobenius_error(&lib, &cli).unwrap() < 1e-7);
}

#[test]
fn bench_error_points_beat_low_rank_at_matched_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate(dir.path(), "w.bsm", 256, 256, 4);
    let csv = dir.path().join("curve.csv");
    ok(&[
        "bench-error", "-i", path_str(&w), "--plans", "32:64:4,32:96:8", "--ranks", "4,8,16,32,64,256", "--max-iters",
        "15", "-o", path_str(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,bytes,cr,rel_error"));
    let rows: Vec<(String, f64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 8);
    let low_rank: Vec<&(String, f64, f64)> = rows.iter().filter(|r| r.0.starts_with("lowrank")).collect();
    for ds in rows.iter().filter(|r| r.0.starts_with("ds")) {
        // the largest rank that fits in the same budget does worse
        let baseline = low_rank.iter().filter(|r| r.1 <= ds.1).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!(ds.2 < baseline.2, "{ds:?} vs {baseline:?}");
    }
    assert!(low_rank.last().unwrap().2 < 1e-6);

    let stdout = ok(&["bench-error", "-i", path_str(&w), "--ranks", "8"]);
    assert!(stdout.starts_with("method,bytes,cr,rel_error\nlowrank[r=8],"));
}

#[test]
fn matmul_matches_reconstructed_product() {
    let dir = tempfile::tempdir().unwrap();
    let w_path = generate(dir.path(), "w.bsm", 48, 32, 6);
    let x_path = generate(dir.path(), "x.bsm", 32, 10, 7);
    let dsf = dir.path().join("w.dsf");
    ok(&["factorize", "-i", path_str(&w_path), "-o", path_str(&dsf), "--b", "8", "--k", "16", "--s", "3", "--max-iters", "5"]);
    let back = dir.path().join("back.bsm");
    ok(&["reconstruct", "-i", path_str(&dsf), "-o", path_str(&back)]);
    let blocked = dir.path().join("y.bsm");
    let reference = dir.path().join("y_ref.bsm");
    ok(&["matmul", "--factors", path_str(&dsf), "-i", path_str(&x_path), "-o", path_str(&blocked), "--tile-p", "5", "--tile-q", "3"]);
    ok(&["matmul", "--factors", path_str(&dsf), "-i", path_str(&x_path), "-o", path_str(&reference), "--reference"]);
    let y = read_bsm(&blocked).unwrap();
    assert_eq!(y, read_bsm(&reference).unwrap());
    let w_hat = read_bsm(&back).unwrap();
    let x = read_bsm(&x_path).unwrap();
    let dense = dsfactor_core::matmul_dense(&w_hat, &x).unwrap();
    assert!(frobenius_error(&dense, &y).unwrap() < 1e-6);

    let out = dsfactor(&["matmul", "--factors", path_str(&dsf), "-i", path_str(&w_path), "-o", path_str(&blocked)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_matmul_writes_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let w_path = generate(dir.path(), "w.bsm", 64, 64, 8);
    let x_path = generate(dir.path(), "x.bsm", 64, 16, 9);
    let dsf = dir.path().join("w.dsf");
    ok(&["factorize", "-i", path_str(&w_path), "-o", path_str(&dsf), "--b", "16", "--k", "32", "--s", "2", "--max-iters", "3"]);
    let out = ok(&[
        "bench-matmul", "--factors", path_str(&dsf), "-i", path_str(&x_path), "--tiles", "4:4,16:8", "--cache-bytes",
        "65536", "--repeats", "2", "--warmup", "0",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "config,tile_p,tile_q,time_ns_min,time_ns_median,macs,macs_per_sec");
    assert_eq!(lines.len(), 5);
    let macs: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(5).unwrap()).collect();
    assert!(macs.iter().all(|m| *m == macs[0]));
}

#[test]
fn train_demo_paired_runs_share_the_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let common = [
        "--s", "1", "--b", "8", "--seed", "7", "--dense-epochs", "2", "--refine-epochs", "1", "--train-size", "128",
    ];
    let mut csvs = Vec::new();
    for schedule in ["ftfstf", "ftfft", "FT-F-STF"] {
        let p = dir.path().join(format!("{schedule}.csv"));
        let mut args = vec!["train-demo", "--schedule", schedule, "-o", path_str(&p)];
        args.extend_from_slice(&common);
        ok(&args);
        csvs.push(std::fs::read_to_string(&p).unwrap());
    }
    assert_eq!(csvs[0], csvs[2]);
    let a: Vec<&str> = csvs[0].lines().collect();
    let b: Vec<&str> = csvs[1].lines().collect();
    assert_eq!(a[0], "stage,epoch,step,loss,accuracy,mean_block_recon_err");
    assert_eq!(a.len(), b.len());
    // header, two dense epochs and the factorization row agree
    assert_eq!(a[..4], b[..4]);
    assert!(a[3].starts_with("factorize,"));
    assert!(a[4].starts_with("stf,") && b[4].starts_with("ft,"));

    let out = dsfactor(&["train-demo", "--schedule", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let w_path = generate(dir.path(), "w.bsm", 32, 64, 10);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let p = dir.path().join(format!("w{threads}.dsf"));
        ok(&[
            "--threads", threads, "factorize", "-i", path_str(&w_path), "-o", path_str(&p), "--b", "8", "--k", "16", "--s",
            "2", "--max-iters", "5",
        ]);
        outputs.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn help_documents_every_subcommand() {
    let top = ok(&["--help"]);
    for cmd in ["plan", "generate", "factorize", "reconstruct", "bench-error", "matmul", "bench-matmul", "train-demo"] {
        assert!(top.contains(cmd), "{cmd}");
        let help = ok(&[cmd, "--help"]);
        assert!(help.contains("Usage:"));
    }
    let help = ok(&["plan", "--help"]);
    for flag in ["--m", "--n", "--b", "--gamma", "--delta", "--cache-bytes", "--elem-bytes", "--csv"] {
        assert!(help.contains(flag), "{flag}");
    }
    let help = ok(&["train-demo", "--help"]);
    assert!(help.contains("[default: ftfstf]") && help.contains("--refactor-stride"));
}
