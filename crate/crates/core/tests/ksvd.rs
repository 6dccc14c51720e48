mod common;

use common::*;
use dsfactor_core::dsfactor::encode_dsf;
use dsfactor_core::io::encode_bsm;
use dsfactor_core::ksvd::{rank_for_budget, TruncatedSvd};
use dsfactor_core::*;
use dsfactor_core::Rng;
use proptest::prelude::*;

fn cfg(seed: u64, iters: usize) -> KsvdConfig {
    KsvdConfig {
        max_iters: iters,
        rel_tol: 0.0,
        ..KsvdConfig::with_seed(seed)
    }
}

#[test]
fn zero_block_has_zero_objective() {
    let f = ksvd_factor(&DenseMatrix::zeros(20, 4), 6, 2, &cfg(1, 10)).unwrap();
    assert_eq!(f.objective_history, vec![0.0]);
    assert!(f.coeffs.values().iter().all(|&v| v == 0.0));
    assert_eq!(f.dictionary.shape(), (6, 4));
    assert!(f.dictionary.frobenius_norm() > 0.0);
}

#[test]
fn rejects_bad_sparsity() {
    let w = DenseMatrix::random_normal(20, 4, &mut Rng::new(1));
    assert!(ksvd_factor(&w, 6, 0, &cfg(1, 5)).is_err());
    assert!(ksvd_factor(&w, 6, 5, &cfg(1, 5)).is_err());
    assert!(ksvd_factor(&w, 3, 4, &cfg(1, 5)).is_err());
    assert!(ksvd_factor(&w, 6, 2, &KsvdConfig { max_iters: 0, ..cfg(1, 5) }).is_err());
}

#[test]
fn dense_codes_reach_the_truncated_svd_error() {
    // s = k < B: the product S·D has rank at most k, so the best possible
    // error is the rank-k tail
    let mut rng = Rng::new(2);
    let w = DenseMatrix::random_normal(40, 10, &mut rng);
    for k in [2usize, 4, 6] {
        let f = ksvd_factor(&w, k, k, &cfg(3, 2000)).unwrap();
        let err = fro_diff(&w, &f.reconstruct());
        let floor = tail_energy(&w, k);
        assert!(err >= floor * (1.0 - 1e-9));
        assert!(err <= floor * (1.0 + 1e-6), "k={k}: {err} vs floor {floor}");
    }
}

#[test]
fn overcomplete_dense_codes_are_exact() {
    let w = DenseMatrix::random_normal(30, 6, &mut Rng::new(4));
    let f = ksvd_factor(&w, 8, 6, &cfg(5, 30)).unwrap();
    assert!(fro_diff(&w, &f.reconstruct()) / fro(&w) < 1e-8);
}

#[test]
fn deterministic_given_seed() {
    let w = DenseMatrix::random_normal(40, 8, &mut Rng::new(6));
    let a = ksvd_factor(&w, 12, 3, &cfg(9, 10)).unwrap();
    let b = ksvd_factor(&w, 12, 3, &cfg(9, 10)).unwrap();
    assert_eq!(a.coeffs, b.coeffs);
    assert_eq!(a.dictionary, b.dictionary);
    assert_eq!(a.objective_history, b.objective_history);
}

#[test]
fn history_matches_final_error() {
    let w = DenseMatrix::random_normal(40, 8, &mut Rng::new(7));
    let f = ksvd_factor(&w, 12, 2, &cfg(1, 15)).unwrap();
    let err = fro_diff(&w, &f.reconstruct()).powi(2);
    assert!((f.objective() - err).abs() <= 1e-9 * f.objective_history[0]);
}

#[test]
fn more_sparsity_is_no_worse_on_average() {
    // the alternating solver is heuristic; compare averages over seeds
    let mut rng = Rng::new(8);
    let w = DenseMatrix::random_normal(60, 8, &mut rng);
    let mean = |s: usize| {
        (0..10u64).map(|seed| ksvd_factor(&w, 16, s, &cfg(seed, 20)).unwrap().objective()).sum::<f64>() / 10.0
    };
    let (e1, e2, e3) = (mean(1), mean(2), mean(3));
    assert!(e2 <= e1 + 1e-6 && e3 <= e2 + 1e-6, "{e1} {e2} {e3}");
}

#[test]
fn lowrank_full_rank_is_exact() {
    let w = DenseMatrix::random_normal(12, 7, &mut Rng::new(9));
    let (u, v) = lowrank_factor(&w, 7).unwrap();
    assert!(fro_diff(&w, &naive_matmul(&u, &v)) / fro(&w) < 1e-10);
    assert!(lowrank_factor(&w, 0).is_err());
    assert!(lowrank_factor(&w, 8).is_err());
}

#[test]
fn lowrank_diagonal_case() {
    let mut w = DenseMatrix::zeros(4, 4);
    for (i, v) in [4.0, 3.0, 2.0, 1.0].into_iter().enumerate() {
        w.set(i, i, v);
    }
    let (u, v) = lowrank_factor(&w, 2).unwrap();
    let err = fro_diff(&w, &naive_matmul(&u, &v));
    assert!((err - 5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn lowrank_matches_jacobi_oracle() {
    let w = DenseMatrix::random_normal(32, 16, &mut Rng::new(10));
    let (u, v) = lowrank_factor(&w, 4).unwrap();
    let err = fro_diff(&w, &naive_matmul(&u, &v));
    let oracle = tail_energy(&w, 4);
    assert!((err - oracle).abs() < 1e-8 * oracle);
    let svd = TruncatedSvd::compute(&w).unwrap();
    let jacobi = jacobi_singular_values(&w);
    for (a, b) in svd.sigma.iter().zip(&jacobi) {
        assert!((a - b).abs() < 1e-10 * jacobi[0]);
    }
}

#[test]
fn lowrank_bytes_cases() {
    assert_eq!(lowrank_bytes(50, 50, 50), 8 * 50 * 50);
    assert_eq!(lowrank_bytes(768, 768, 96), 589_824);
    // the two factors written as BSM payloads occupy exactly this many bytes
    let w = DenseMatrix::random_normal(20, 12, &mut Rng::new(11));
    let (u, v) = lowrank_factor(&w, 5).unwrap();
    let mut bu = Vec::new();
    let mut bv = Vec::new();
    encode_bsm(&u, &mut bu).unwrap();
    encode_bsm(&v, &mut bv).unwrap();
    assert_eq!((bu.len() - 12 + bv.len() - 12) as u64, lowrank_bytes(20, 12, 5));
}

#[test]
fn budget_rank_never_undershoots() {
    for budget in [1000.0, 50_000.0, 589_824.0, 589_825.0] {
        let r = rank_for_budget(768, 768, budget);
        assert!(lowrank_bytes(768, 768, r) as f64 >= budget);
        if r > 1 {
            assert!((lowrank_bytes(768, 768, r - 1) as f64) < budget);
        }
    }
}

#[test]
fn block_factor_serializes_through_dsf() {
    let w = DenseMatrix::random_normal(24, 8, &mut Rng::new(12));
    let f = factorize(&w, BlockPlan::new(8, 12, 2), &cfg(0, 5)).unwrap();
    let mut buf = Vec::new();
    encode_dsf(&f, &mut buf).unwrap();
    assert_eq!(buf.len(), 24 + 4 * 12 * 8 + 6 * 24 * 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn objective_never_increases(seed in any::<u64>(), m in 10usize..40, b in 3usize..8, extra in 1usize..6, s in 1usize..4) {
        let s = s.min(b);
        let k = b + extra;
        let w = DenseMatrix::random_normal(m, b, &mut Rng::new(seed));
        let f = ksvd_factor(&w, k, s, &cfg(seed, 12)).unwrap();
        let h = &f.objective_history;
        // exact fits wander at rounding level, so compare against the input energy
        let scale = fro(&w).powi(2);
        for pair in h.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12 * scale);
        }
        // exactly s nonzeros stored per row
        prop_assert_eq!(f.coeffs.indices().len(), m * s);
        prop_assert!(f.dictionary.is_finite());
    }
}


