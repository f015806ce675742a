mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use unlearn_core::metrics::{frechet_distance, frechet_from_stats, id_metric, paired_id, FeatureStats};
use unlearn_core::nets::LatentCode;
use unlearn_core::rng::{normal_vec, substream};

fn rows(n: usize, k: usize, seed: u64, shift: f64, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, "rows", 0);
    (0..n)
        .map(|_| normal_vec(&mut rng, k).into_iter().map(|v| shift + scale * v).collect())
        .collect()
}

#[test]
fn identical_sets_are_at_distance_zero() {
    for k in [1, 8, 64] {
        let a = rows(500, k, k as u64, 0.3, 1.7);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d <= 1e-6, "k = {k}: {d}");
    }
}

#[test]
fn one_dimensional_estimate_converges_to_the_closed_form() {
    // N(0, 1) vs N(1, 4): (1 - 0)^2 + (1 - 2)^2 = 2
    let exact = 2.0;
    let mut errs = Vec::new();
    for n in [1_000usize, 10_000, 100_000] {
        let a = rows(n, 1, 11, 0.0, 1.0);
        let b = rows(n, 1, 12, 1.0, 2.0);
        let err = (frechet_distance(&a, &b).unwrap() - exact).abs();
        assert!(err <= 12.0 / (n as f64).sqrt(), "n = {n}: error {err}");
        errs.push(err);
    }
    assert!(errs[2] < 0.05, "{errs:?}");
}

fn stats(mean: &[f64], cov: DMatrix<f64>) -> FeatureStats {
    FeatureStats {
        n: 2,
        mean: DVector::from_column_slice(mean),
        cov,
    }
}

#[test]
fn matches_the_two_by_two_trace_formula_for_non_commuting_covariances() {
    // for 2x2 M with positive eigenvalues, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))
    let a = DMatrix::<f64>::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
    let b = DMatrix::<f64>::from_row_slice(2, 2, &[0.5, -0.3, -0.3, 3.0]);
    let ab = &a * &b;
    let cross = (ab.trace() + 2.0 * ab.determinant().sqrt()).sqrt();
    let exact = (0.5f64.powi(2) + 1.5f64.powi(2)) + a.trace() + b.trace() - 2.0 * cross;
    let got = frechet_from_stats(&stats(&[0.0, 0.0], a), &stats(&[0.5, -1.5], b)).unwrap();
    assert!((got - exact).abs() <= 1e-5, "{got} vs {exact}");
}

#[test]
fn diagonal_covariances_reduce_to_per_coordinate_terms() {
    let va: [f64; 4] = [1.0, 4.0, 0.25, 9.0];
    let vb: [f64; 4] = [2.0, 1.0, 0.25, 16.0];
    let (ma, mb): ([f64; 4], [f64; 4]) = ([0.0, 1.0, 2.0, 3.0], [1.0, 1.0, -2.0, 3.5]);
    let exact: f64 = (0..4)
        .map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2))
        .sum();
    let got = frechet_from_stats(
        &stats(&ma, DMatrix::from_diagonal(&DVector::from_column_slice(&va))),
        &stats(&mb, DMatrix::from_diagonal(&DVector::from_column_slice(&vb))),
    )
    .unwrap();
    assert!((got - exact).abs() <= 1e-5, "{got} vs {exact}");
}

#[test]
fn too_few_samples_or_mismatched_widths_are_errors() {
    assert!(frechet_distance(&rows(1, 3, 0, 0.0, 1.0), &rows(5, 3, 1, 0.0, 1.0)).is_err());
    assert!(frechet_distance(&rows(5, 3, 0, 0.0, 1.0), &rows(5, 4, 1, 0.0, 1.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_and_nonnegative(
        k in 1usize..12,
        na in 2usize..40,
        nb in 2usize..40,
        seed in any::<u64>(),
        shift in -3.0f64..3.0,
        scale in 0.0f64..4.0,
    ) {
        let a = rows(na, k, seed, 0.0, 1.0);
        let b = rows(nb, k, seed ^ 1, shift, scale);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0 && ba >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab), "{} vs {}", ab, ba);
    }
}

#[test]
fn a_generator_keeps_its_own_identity() {
    let t = common::tiny(3);
    assert!((id_metric(&t.g_s, &t.g_s, &t.w_u, &t.embedder).unwrap() - 1.0).abs() <= 1e-12);
    let mut rng = substream(3, "ws", 0);
    let ws: Vec<LatentCode> = (0..6).map(|_| LatentCode(normal_vec(&mut rng, t.g_s.config.w_dim))).collect();
    for v in paired_id(&t.g_s, &t.g_s, &t.embedder, &ws).unwrap() {
        assert!((v - 1.0).abs() <= 1e-12);
    }
    let other = paired_id(&t.g_s, &t.g_u, &t.embedder, &ws).unwrap();
    assert!(other.iter().all(|v| (-1.0..=1.0).contains(v)));
}
