//! Generation quality metrics: FID on classifier features, PRD precision and
//! recall, 1-D Wasserstein distances, and per-task result matrices.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::classifier::{accuracy, cross_entropy};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Net, NetBuilder};
use crate::tensor::{Float, Tensor};
use crate::vae::{batches, EpochLog, Logger};

pub const FID_JITTER: f64 = 1e-6;
pub const FEATURE_NET_GATE: f64 = 0.98;

fn mean_cov(x: &Tensor<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, f) = x.dims2();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 feature rows for a covariance, got {n}")));
    }
    let m = DMatrix::from_row_slice(n, f, x.data());
    let mu = DVector::from_iterator(f, (0..f).map(|j| m.column(j).mean()));
    let mut c = m.clone();
    for j in 0..f {
        let mj = mu[j];
        c.column_mut(j).add_scalar_mut(-mj);
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = a.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `tr((A B)^{1/2})` for symmetric PSD `A`, `B`, through the symmetric product
/// `A^{1/2} B A^{1/2}`. `None` when the spectrum is not usable.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let sa = sym_sqrt(a);
    let m = &sa * b * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let ev = m.symmetric_eigenvalues();
    let scale = ev.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    if ev.iter().any(|v| !v.is_finite() || *v < -1e-8 * scale) {
        return None;
    }
    Some(ev.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Fréchet distance between Gaussian fits of two feature sets (`[n, F]`).
pub fn fid(real: &Tensor<f64>, gen: &Tensor<f64>) -> Result<f64> {
    if real.dims2().1 != gen.dims2().1 {
        return Err(Error::Contract(format!("feature widths differ: {:?} vs {:?}", real.shape(), gen.shape())));
    }
    let (mr, cr) = mean_cov(real)?;
    let (mg, cg) = mean_cov(gen)?;
    let f = mr.len();
    let diff = (&mr - &mg).norm_squared();
    let tr = match trace_sqrt_product(&cr, &cg) {
        Some(t) => t,
        None => {
            let j = DMatrix::identity(f, f) * FID_JITTER;
            trace_sqrt_product(&(&cr + &j), &(&cg + &j))
                .ok_or_else(|| Error::Numerical("covariance square root is not finite after jitter".into()))?
        }
    };
    let v = diff + cr.trace() + cg.trace() - 2.0 * tr;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("FID evaluated to {v}")));
    }
    Ok(v.max(0.0))
}

/// 1-D Wasserstein-1 distance between two empirical distributions, i.e. the
/// area between their CDFs. Equals the mean sorted-pair gap for equal sizes.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("wasserstein_1d needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrdConfig {
    pub num_clusters: usize,
    pub num_angles: usize,
    /// Independent clusterings whose curves are averaged.
    pub num_runs: usize,
    pub seed: u64,
}

impl Default for PrdConfig {
    fn default() -> Self {
        Self { num_clusters: 20, num_angles: 1001, num_runs: 10, seed: 0 }
    }
}

/// PRD curve of two histograms over the same bins, `num_angles` slopes.
pub fn prd_curve(ref_hist: &[f64], eval_hist: &[f64], num_angles: usize) -> (Vec<f64>, Vec<f64>) {
    let eps = 1e-10;
    let span = std::f64::consts::FRAC_PI_2 - 2.0 * eps;
    let mut precision = Vec::with_capacity(num_angles);
    let mut recall = Vec::with_capacity(num_angles);
    for k in 0..num_angles {
        let angle = eps + span * k as f64 / (num_angles.max(2) - 1) as f64;
        let slope = angle.tan();
        let p: f64 = ref_hist.iter().zip(eval_hist).map(|(&r, &e)| (r * slope).min(e)).sum();
        precision.push(p.clamp(0.0, 1.0));
        recall.push((p / slope).clamp(0.0, 1.0));
    }
    (precision, recall)
}

/// Largest `F_beta` along a PRD curve.
pub fn max_f_beta(precision: &[f64], recall: &[f64], beta: f64) -> f64 {
    let b2 = beta * beta;
    precision
        .iter()
        .zip(recall)
        .map(|(&p, &r)| if p + r > 0.0 { (1.0 + b2) * p * r / (b2 * p + r) } else { 0.0 })
        .fold(0.0, f64::max)
}

/// `(precision, recall)` as `(max F_{1/8}, max F_8)` of a PRD curve.
pub fn prd_summary(precision: &[f64], recall: &[f64]) -> (f64, f64) {
    (max_f_beta(precision, recall, 1.0 / 8.0), max_f_beta(precision, recall, 8.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding; returns the assignment.
pub fn kmeans(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng, max_iter: usize) -> Vec<usize> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    centers.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.extend(c);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let p = row(i);
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(p, &centers[c * dim..(c + 1) * dim]);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    assign
}

fn histogram(assign: &[usize], k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for &a in assign {
        h[a] += 1.0;
    }
    let n = assign.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Distribution precision and recall of `gen` against `real` (`[n, F]`
/// features): joint k-means histograms, PRD curves averaged over runs,
/// summarized by max `F_{1/8}` and `F_8`.
pub fn precision_recall(real: &Tensor<f64>, gen: &Tensor<f64>, cfg: &PrdConfig) -> Result<(f64, f64)> {
    let (nr, f) = real.dims2();
    let (ng, fg) = gen.dims2();
    if nr == 0 || ng == 0 {
        return Err(Error::Contract("precision_recall needs non-empty sets".into()));
    }
    if f != fg {
        return Err(Error::Contract(format!("feature widths differ: {f} vs {fg}")));
    }
    if cfg.num_clusters == 0 || cfg.num_clusters > nr + ng {
        return Err(Error::Config(format!("{} clusters for {} samples", cfg.num_clusters, nr + ng)));
    }
    let mut points = real.data().to_vec();
    points.extend_from_slice(gen.data());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let runs = cfg.num_runs.max(1);
    let mut p_avg = vec![0.0; cfg.num_angles];
    let mut r_avg = vec![0.0; cfg.num_angles];
    for _ in 0..runs {
        let assign = kmeans(&points, f, cfg.num_clusters, &mut rng, 100);
        let hr = histogram(&assign[..nr], cfg.num_clusters);
        let hg = histogram(&assign[nr..], cfg.num_clusters);
        let (p, r) = prd_curve(&hr, &hg, cfg.num_angles);
        p_avg.iter_mut().zip(&p).for_each(|(a, v)| *a += v / runs as f64);
        r_avg.iter_mut().zip(&r).for_each(|(a, v)| *a += v / runs as f64);
    }
    Ok(prd_summary(&p_avg, &r_avg))
}

/// Per-sample sums of each image channel (`[n, C, H, W]` -> `C` vectors).
pub fn channel_sums<T: Float>(images: &Tensor<T>) -> Vec<Vec<f64>> {
    let s = images.shape();
    let (n, c) = (s[0], s[1]);
    let per: usize = s[2..].iter().product();
    let d = images.data();
    (0..c)
        .map(|ch| (0..n).map(|i| d[(i * c + ch) * per..(i * c + ch + 1) * per].iter().map(|v| v.as_f64()).sum()).collect())
        .collect()
}

/// Per-channel Wasserstein distances between channel-sum distributions.
pub fn channel_wasserstein<T: Float>(real: &Tensor<T>, gen: &Tensor<T>) -> Result<Vec<f64>> {
    channel_sums(real).iter().zip(channel_sums(gen)).map(|(a, b)| wasserstein_1d(a, &b)).collect()
}

/// Small LeNet-style classifier whose penultimate activations serve as FID
/// features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub body: Net<f32>,
    pub head: Net<f32>,
    pub test_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self { epochs: 20, batch: 64, lr: 1e-3, seed: 0 }
    }
}

impl FeatureNet {
    pub fn new(image: [usize; 3], classes: usize, rng: &mut impl Rng) -> Self {
        let body = NetBuilder::new(&image, rng)
            .conv(6, 5, 1, 0, true)
            .relu()
            .max_pool2()
            .conv(16, 5, 1, 0, true)
            .relu()
            .max_pool2()
            .flatten()
            .linear(120)
            .relu()
            .linear(84)
            .relu()
            .build();
        let head = NetBuilder::new(&body.output_shape, rng).linear(classes).build();
        Self { body, head, test_accuracy: f64::NAN }
    }

    pub fn feature_dim(&self) -> usize {
        self.body.output_shape[0]
    }

    /// Eval-mode features of `[0, 1]` images, computed in chunks.
    pub fn features(&self, images: &Tensor<f32>) -> Tensor<f64> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.feature_dim());
        for start in (0..n).step_by(500) {
            let idx: Vec<usize> = (start..(start + 500).min(n)).collect();
            out.extend(self.body.infer(&images.select_rows(&idx)).data().iter().map(|&v| v as f64));
        }
        Tensor::from_vec(&[n, self.feature_dim()], out)
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Vec<usize> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(500) {
            let idx: Vec<usize> = (start..(start + 500).min(n)).collect();
            let logits = self.head.infer(&self.body.infer(&images.select_rows(&idx)));
            let (rows, c) = logits.dims2();
            for r in 0..rows {
                let row = &logits.data()[r * c..(r + 1) * c];
                out.push((0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b }));
            }
        }
        out
    }

    pub fn passes_gate(&self) -> bool {
        self.test_accuracy >= FEATURE_NET_GATE
    }
}

/// Train the feature network on a full train split and score it on the test
/// split. Missing the accuracy gate is reported, not fatal.
pub fn train_feature_net(
    train: &crate::data::Dataset,
    test: &crate::data::Dataset,
    cfg: &FeatureNetConfig,
    log: &mut Logger<'_>,
) -> Result<FeatureNet> {
    let mut rng = crate::rng::stream(cfg.seed, &[crate::rng::tag::FEATURE_NET]);
    let mut fnet = FeatureNet::new(train.image_shape(), train.num_classes, &mut rng);
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, 1.0));
    for epoch in 0..cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in batches(&mut rng, train.len(), cfg.batch) {
            let bb = fnet.body.bind(true);
            let bh = fnet.head.bind(true);
            let x = Var::constant(train.images.select_rows(&idx));
            let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let logits = fnet.head.forward(&bh, &fnet.body.forward(&bb, &x, true), true);
            let loss = cross_entropy(&logits, &ys);
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("feature net loss diverged at epoch {epoch}")));
            }
            let mut params = bb.leaves();
            params.extend(bh.leaves());
            let g = crate::autograd::grad_values(&loss, &params);
            opt.step(&mut [&mut fnet.body, &mut fnet.head], &g);
            sum += lv * idx.len() as f64;
            count += idx.len();
        }
        log(&EpochLog { stage: "feature_net", task: 0, epoch, loss: sum / count.max(1) as f64, extra: vec![] });
    }
    fnet.test_accuracy = accuracy(&fnet.predict(&test.images), &test.labels);
    Ok(fnet)
}

/// Load a cached feature net or train and cache one.
pub fn feature_net_cached(
    path: &Path,
    train: &crate::data::Dataset,
    test: &crate::data::Dataset,
    cfg: &FeatureNetConfig,
    log: &mut Logger<'_>,
) -> Result<FeatureNet> {
    if path.exists() {
        let mut rng = crate::rng::stream(cfg.seed, &[crate::rng::tag::FEATURE_NET]);
        let mut fnet = FeatureNet::new(train.image_shape(), train.num_classes, &mut rng);
        let (tensors, meta) = crate::checkpoint::read_tensors::<f32>(path)?;
        fnet.body.load_named("body", &tensors)?;
        fnet.head.load_named("head", &tensors)?;
        fnet.test_accuracy = meta
            .get("test_accuracy")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::load(path, "missing test_accuracy"))?;
        return Ok(fnet);
    }
    let fnet = train_feature_net(train, test, cfg, log)?;
    let mut named = fnet.body.named_tensors("body");
    named.extend(fnet.head.named_tensors("head"));
    let meta = [("test_accuracy".to_string(), format!("{}", fnet.test_accuracy))].into_iter().collect();
    crate::checkpoint::write_tensors(path, &named, &meta)?;
    Ok(fnet)
}

/// Scores of one `(trained_after, evaluated)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub trained_after: usize,
    pub evaluated: usize,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub wasserstein: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub num_tasks: usize,
    pub samples_per_task: usize,
    pub feature_net_accuracy: f64,
    pub feature_net_valid: bool,
    pub rows: Vec<MetricsRow>,
    /// Accuracy over all classes seen, one entry per completed task.
    pub accuracy: Vec<Option<f64>>,
    pub finetune_accuracy: Vec<Option<f64>>,
}

fn matrix_of(report: &MetricsReport, f: impl Fn(&MetricsRow) -> f64) -> Vec<Vec<Option<f64>>> {
    let k = report.num_tasks;
    let mut m = vec![vec![None; k]; k];
    for r in &report.rows {
        if r.trained_after < k && r.evaluated < k {
            m[r.trained_after][r.evaluated] = Some(f(r));
        }
    }
    m
}

impl MetricsReport {
    pub fn fid_matrix(&self) -> Vec<Vec<Option<f64>>> {
        matrix_of(self, |r| r.fid)
    }

    pub fn precision_matrix(&self) -> Vec<Vec<Option<f64>>> {
        matrix_of(self, |r| r.precision)
    }

    pub fn recall_matrix(&self) -> Vec<Vec<Option<f64>>> {
        matrix_of(self, |r| r.recall)
    }

    fn final_rows(&self) -> Vec<&MetricsRow> {
        let last = self.rows.iter().map(|r| r.trained_after).max();
        self.rows.iter().filter(|r| Some(r.trained_after) == last).collect()
    }

    fn final_mean(&self, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        let rows = self.final_rows();
        rows.iter().map(|r| f(r)).sum::<f64>() / rows.len().max(1) as f64
    }

    /// Mean over tasks of the scores after the last completed task.
    pub fn final_fid(&self) -> f64 {
        self.final_mean(|r| r.fid)
    }

    pub fn final_precision(&self) -> f64 {
        self.final_mean(|r| r.precision)
    }

    pub fn final_recall(&self) -> f64 {
        self.final_mean(|r| r.recall)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy.iter().rev().flatten().next().copied()
    }

    /// One line per `(trained_after, evaluated)` pair, tasks numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trained_after,evaluated,fid,precision,recall,wasserstein,accuracy,finetune_accuracy\n");
        let opt = |v: Option<&Option<f64>>| v.copied().flatten().map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let w: Vec<String> = r.wasserstein.iter().map(|v| format!("{v}")).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.trained_after + 1,
                r.evaluated + 1,
                r.fid,
                r.precision,
                r.recall,
                w.join(";"),
                opt(self.accuracy.get(r.trained_after)),
                opt(self.finetune_accuracy.get(r.trained_after)),
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        let doc = serde_json::json!({
            "report": self,
            "fid_matrix": self.fid_matrix(),
            "precision_matrix": self.precision_matrix(),
            "recall_matrix": self.recall_matrix(),
            "final": {
                "fid": self.final_fid(),
                "precision": self.final_precision(),
                "recall": self.final_recall(),
                "accuracy": self.final_accuracy(),
            },
        });
        serde_json::to_string_pretty(&doc).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        Ok(serde_json::from_value(v["report"].clone())?)
    }
}

/// Scores `generated` task-conditioned samples against the task's real test
/// images, both as `[0, 1]` images.
pub fn score_task(
    fnet: &FeatureNet,
    real: &Tensor<f32>,
    generated: &Tensor<f32>,
    prd: &PrdConfig,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    let fr = fnet.features(real);
    let fg = fnet.features(generated);
    let f = fid(&fr, &fg)?;
    let clusters = prd.num_clusters.min(fr.dims2().0 + fg.dims2().0);
    let (p, r) = precision_recall(&fr, &fg, &PrdConfig { num_clusters: clusters, ..*prd })?;
    let w = channel_wasserstein(real, generated)?;
    Ok((f, p, r, w))
}
