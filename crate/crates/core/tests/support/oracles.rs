//! Metric checks against closed forms and hand-computed values.

use multiband::alignment::{sample_global, BundleKind, GenerativeBundle};
use multiband::metrics::{fid, precision_recall, wasserstein_1d, PrdConfig};
use multiband::models::{Pipeline, Translator, TranslatorSpec};
use multiband::nn::NetBuilder;
use multiband::tensor::Tensor;
use multiband::vae::BinaryPrior;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Rows whose sample mean is `mu` and sample covariance (n - 1
/// normalization) is exactly `sigma`: a scaled sign design pushed through
/// the Cholesky factor.
pub fn gaussian_design(mu: &[f64], sigma: &DMatrix<f64>) -> Tensor<f64> {
    let d = mu.len();
    let n = 1usize << d;
    let scale = ((n - 1) as f64 / n as f64).sqrt();
    let l = sigma.clone().cholesky().expect("positive definite").l();
    let mut v = Vec::with_capacity(n * d);
    for r in 0..n {
        let y = DVector::from_iterator(d, (0..d).map(|b| if (r >> b) & 1 == 1 { -scale } else { scale }));
        let x = &l * y;
        v.extend((0..d).map(|j| x[j] + mu[j]));
    }
    Tensor::from_vec(&[n, d], v)
}

/// `(computed, expected)` for Gaussian cases whose FID has a closed form.
/// The 3-D value was computed independently with scipy's `sqrtm`.
pub fn fid_closed_forms() -> Vec<(f64, f64)> {
    let m = |r: usize, v: &[f64]| DMatrix::from_row_slice(r, r, v);
    let cases = [
        // diagonal: |dmu|^2 + sum (s1 + s2 - 2 sqrt(s1 s2))
        (vec![0.0, 0.0], m(2, &[1.0, 0.0, 0.0, 4.0]), vec![1.0, 2.0], m(2, &[4.0, 0.0, 0.0, 9.0]), 7.0),
        // correlated against identity: 4 - 2 sqrt(3)
        (vec![0.0, 0.0], m(2, &[2.0, 1.0, 1.0, 2.0]), vec![0.0, 0.0], m(2, &[1.0, 0.0, 0.0, 1.0]), 4.0 - 2.0 * 3f64.sqrt()),
        (
            vec![0.0, 1.0, -1.0],
            m(3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.5, 0.0, 0.5, 1.0]),
            vec![0.5, 0.0, 2.0],
            m(3, &[1.0, 0.0, 0.0, 0.0, 4.0, -1.0, 0.0, -1.0, 3.0]),
            12.044270101183228,
        ),
    ];
    cases
        .into_iter()
        .map(|(m1, s1, m2, s2, want)| (fid(&gaussian_design(&m1, &s1), &gaussian_design(&m2, &s2)).unwrap(), want))
        .collect()
}

/// FID of a random feature set against itself.
pub fn fid_self() -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let a: Tensor<f64> = multiband::rng::normal(&mut r, &[300, 12]);
    fid(&a, &a).unwrap()
}

/// Precision/recall for identical sets and for two far-apart sets.
pub fn precision_recall_extremes() -> ((f64, f64), (f64, f64)) {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let a: Tensor<f64> = multiband::rng::normal(&mut r, &[600, 8]);
    let far = a.map(|v| v + 100.0);
    let cfg = PrdConfig { num_clusters: 20, num_angles: 1001, num_runs: 5, seed: 0 };
    (precision_recall(&a, &a, &cfg).unwrap(), precision_recall(&a, &far, &cfg).unwrap())
}

/// `(computed, expected)` Wasserstein-1 values worked out by hand.
pub fn wasserstein_hand_cases() -> Vec<(f64, f64)> {
    let w = |a: &[f64], b: &[f64]| wasserstein_1d(a, b).unwrap();
    vec![
        (w(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]), 1.0),
        (w(&[3.0, 0.0], &[0.0, 3.0]), 0.0),
        (w(&[0.0], &[0.0, 1.0]), 0.5),
        (w(&[0.0, 0.0, 0.0, 1.0], &[1.0]), 0.75),
        (w(&[0.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 1.0),
        (w(&[-1.0, 1.0], &[0.0]), 1.0),
    ]
}

/// Tiny task-conditioned bundle with `tasks` tasks seen.
pub fn tiny_bundle(tasks: usize) -> GenerativeBundle<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let spec = TranslatorSpec { cont_dim: 2, bin_dim: 2, code_width: 4, hidden: 0, out_dim: 0, identity: true };
    let net = NetBuilder::new(&[spec.global_dim()], &mut r).linear(4).sigmoid().reshape(&[1, 2, 2]).build();
    GenerativeBundle {
        kind: BundleKind::Vae,
        global: Pipeline { translator: Translator::new(spec, &mut r), net },
        tasks_seen: tasks,
        priors: vec![BinaryPrior::half(2); tasks],
    }
}

/// Chi-square p-value of the task ids drawn by `n` global samples.
pub fn task_id_uniformity_p(n: usize, tasks: usize) -> f64 {
    let b = tiny_bundle(tasks);
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let (_, ids) = sample_global(&b, n, &mut r, None).unwrap();
    let mut counts = vec![0usize; tasks];
    for t in ids {
        counts[t] += 1;
    }
    let e = n as f64 / tasks as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((tasks - 1) as f64).unwrap().cdf(stat)
}
