#[path = "support/oracles.rs"]
mod oracles;

use multiband::metrics::{fid, wasserstein_1d};
use multiband::tensor::Tensor;
use nalgebra::DMatrix;

#[test]
fn design_has_the_requested_moments() {
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let x = oracles::gaussian_design(&[1.0, -1.0], &s);
    let (n, _) = x.dims2();
    let mean: Vec<f64> = (0..2).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    assert!((mean[0] - 1.0).abs() < 1e-12 && (mean[1] + 1.0).abs() < 1e-12);
    let c01: f64 = (0..n).map(|i| (x.row(i)[0] - mean[0]) * (x.row(i)[1] - mean[1])).sum::<f64>() / (n - 1) as f64;
    assert!((c01 - 1.0).abs() < 1e-12);
}

#[test]
fn fid_of_identical_sets_is_zero() {
    assert!(oracles::fid_self() <= 1e-6);
}

#[test]
fn fid_matches_gaussian_closed_forms() {
    for (got, want) in oracles::fid_closed_forms() {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn fid_ignores_a_shared_shift() {
    let s = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 1.0]);
    let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let a = oracles::gaussian_design(&[0.0, 0.0], &s);
    let b = oracles::gaussian_design(&[1.0, 1.0], &t);
    let shift = |x: &Tensor<f64>| x.map(|v| v + 7.5);
    assert!((fid(&a, &b).unwrap() - fid(&shift(&a), &shift(&b)).unwrap()).abs() < 1e-9);
}

#[test]
fn precision_recall_extremes() {
    let ((p1, r1), (p0, r0)) = oracles::precision_recall_extremes();
    assert!(p1 >= 0.95 && r1 >= 0.95, "identical sets: {p1} {r1}");
    assert!(p0 <= 0.05 && r0 <= 0.05, "disjoint sets: {p0} {r0}");
}

#[test]
fn wasserstein_hand_cases_are_exact() {
    for (got, want) in oracles::wasserstein_hand_cases() {
        assert_eq!(got, want);
    }
}

#[test]
fn wasserstein_rejects_empty_input() {
    assert!(wasserstein_1d(&[], &[1.0]).is_err());
}

#[test]
fn sampled_task_ids_are_uniform() {
    let p = oracles::task_id_uniformity_p(10_000, 5);
    assert!(p > 0.01, "chi-square p = {p}");
}
