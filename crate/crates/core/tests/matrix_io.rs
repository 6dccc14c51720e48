mod common;

use common::{fro, naive_matmul};
use dsfactor_core::io::{decode_bsm, encode_bsm};
use dsfactor_core::matrix::{matmul_nt, matmul_tn};
use dsfactor_core::*;
use dsfactor_core::Rng;
use proptest::prelude::*;

#[test]
fn identity_times_matrix() {
    let b = DenseMatrix::random_normal(3, 4, &mut Rng::new(1));
    assert_eq!(matmul_dense(&DenseMatrix::identity(3), &b).unwrap(), b);
}

#[test]
fn small_product_by_hand() {
    let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
    assert_eq!(matmul_dense(&a, &b).unwrap().data(), &[3.0, 7.0]);
}

#[test]
fn product_matches_triple_loop() {
    let mut rng = Rng::new(2);
    let a = DenseMatrix::random_normal(17, 9, &mut rng);
    let b = DenseMatrix::random_normal(9, 5, &mut rng);
    let got = matmul_dense(&a, &b).unwrap();
    let want = naive_matmul(&a, &b);
    let max = got.data().iter().zip(want.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max < 1e-12);
    // transposed variants agree with the explicit transpose
    let c = DenseMatrix::random_normal(17, 5, &mut rng);
    assert!(common::fro_diff(&matmul_tn(&a, &c).unwrap(), &naive_matmul(&a.transpose(), &c)) < 1e-12);
    assert!(common::fro_diff(&matmul_nt(&a, &a).unwrap(), &naive_matmul(&a, &a.transpose())) < 1e-12);
}

#[test]
fn product_dimension_mismatch_is_reported() {
    let err = matmul_dense(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 3)).unwrap_err();
    assert!(err.to_string().contains("2x3"));
}

#[test]
fn large_product_is_thread_count_invariant() {
    let mut rng = Rng::new(3);
    let a = DenseMatrix::random_normal(200, 150, &mut rng);
    let b = DenseMatrix::random_normal(150, 90, &mut rng);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| matmul_dense(&a, &b).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert!(one.data().iter().zip(four.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn relative_error_cases() {
    let w = DenseMatrix::random_normal(4, 4, &mut Rng::new(4));
    assert_eq!(frobenius_error(&w, &w).unwrap(), 0.0);
    let a = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
    assert_eq!(frobenius_error(&a, &DenseMatrix::zeros(1, 2)).unwrap(), 1.0);
    assert!(frobenius_error(&DenseMatrix::zeros(1, 2), &a).is_err());
    assert!(frobenius_error(&a, &DenseMatrix::zeros(2, 1)).is_err());
}

#[test]
fn relative_error_matches_direct_sum() {
    let mut rng = Rng::new(5);
    let w = DenseMatrix::random_normal(30, 20, &mut rng);
    let v = DenseMatrix::random_normal(30, 20, &mut rng);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..30 {
        for j in 0..20 {
            num += (w.get(i, j) - v.get(i, j)).powi(2);
            den += w.get(i, j).powi(2);
        }
    }
    let want = (num / den).sqrt();
    assert!((frobenius_error(&w, &v).unwrap() - want).abs() < 1e-12);
}

#[test]
fn bsm_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bsm");
    let m = DenseMatrix::random_normal(6, 11, &mut Rng::new(6)).round_to_f32();
    write_bsm(&m, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 12 + 4 * 66);
    assert_eq!(read_bsm(&path).unwrap(), m);
}

#[test]
fn bsm_rejects_bad_input() {
    let mut buf = Vec::new();
    encode_bsm(&DenseMatrix::zeros(2, 2), &mut buf).unwrap();

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(decode_bsm(&bad).unwrap_err().to_string().contains("not a BSM file"));

    let mut zero = buf.clone();
    zero[4..8].copy_from_slice(&0u32.to_le_bytes());
    assert!(decode_bsm(&zero).is_err());

    assert!(decode_bsm(&buf[..buf.len() - 1]).is_err());
    assert!(decode_bsm(&buf[..7]).is_err());

    let mut huge = buf.clone();
    huge[4..12].copy_from_slice(&[0xff; 8]);
    assert!(decode_bsm(&huge).is_err());
}

#[test]
fn failed_write_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.bsm");
    let res = dsfactor_core::io::write_atomically(&path, |w| {
        w.write_all(b"partial")?;
        Err(Error::Numeric("boom".into()))
    });
    assert!(res.is_err());
    assert!(!path.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn heavy_tailed_spectrum_is_prescribed() {
    for decay in [0.0, 0.3, 1.0] {
        let w = random_heavy_tailed(40, 25, decay, &mut Rng::new(7)).unwrap();
        let sv = common::jacobi_singular_values(&w);
        for (i, s) in sv.iter().enumerate() {
            let want = ((i + 1) as f64).powf(-decay);
            assert!((s - want).abs() < 1e-6 * want, "decay {decay}, sigma_{i} = {s}, want {want}");
        }
    }
    let a = random_heavy_tailed(10, 10, 0.5, &mut Rng::new(8)).unwrap();
    let b = random_heavy_tailed(10, 10, 0.5, &mut Rng::new(8)).unwrap();
    assert_eq!(a, b);
    assert!(random_heavy_tailed(10, 10, 1.5, &mut Rng::new(8)).is_err());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| DenseMatrix::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multiplication_is_associative((a, b, c) in (1usize..8, 1usize..8, 1usize..8, 1usize..8)
        .prop_flat_map(|(m, n, p, q)| (matrix(m, n), matrix(n, p), matrix(p, q))))
    {
        let left = matmul_dense(&matmul_dense(&a, &b).unwrap(), &c).unwrap();
        let right = matmul_dense(&a, &matmul_dense(&b, &c).unwrap()).unwrap();
        let scale = fro(&left);
        prop_assume!(scale > 1e-6);
        prop_assert!(common::fro_diff(&left, &right) / scale < 1e-10);
    }

    #[test]
    fn bsm_round_trip_is_bitwise(rows in 1usize..6, cols in 1usize..6,
        bits in prop::collection::vec(any::<u32>(), 36))
    {
        let data: Vec<f64> = bits.iter().take(rows * cols)
            .map(|&b| f32::from_bits(b))
            .map(|f| if f.is_finite() { f } else { -0.0 })
            .map(f64::from)
            .collect();
        let m = DenseMatrix::new(rows, cols, data).unwrap();
        let mut buf = Vec::new();
        encode_bsm(&m, &mut buf).unwrap();
        let back = decode_bsm(&buf).unwrap();
        prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
