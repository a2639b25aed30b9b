//! Downstream classification on top of the aligned latent space.
//!
//! A feature extractor learns to invert the global generator (images back to
//! their latents) and a small head classifies latents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{BundleKind, GenerativeBundle};
use crate::autograd::{grad_values, Var};
use crate::data::to_signed;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Net, NetBuilder};
use crate::tensor::{Float, Tensor};
use crate::vae::{batches, EpochLog, Logger};

pub const FE_HIDDEN: [usize; 2] = [400, 400];
pub const HEAD_HIDDEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub fe_epochs: usize,
    pub head_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    /// Generated pairs drawn per seen task, for both stages.
    pub samples_per_task: usize,
    pub current_source: CurrentSource,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            fe_epochs: 100,
            head_epochs: 20,
            batch: 256,
            lr: 1e-3,
            decay: 0.99,
            samples_per_task: 2000,
            current_source: CurrentSource::Generated,
        }
    }
}

/// Where the head's current-task latents come from once previous tasks exist.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurrentSource {
    /// Generations of the current task, labelled by a provisional head fit
    /// on `fe(real x)`. Every head input then lives on the generator's side
    /// of the latent space.
    #[default]
    Generated,
    /// `fe(real x)` with ground-truth labels.
    Real,
}

/// Images to latents. Output width equals the bundle's latent size.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T: Float> {
    pub net: Net<T>,
}

impl<T: Float> FeatureExtractor<T> {
    pub fn new(image: [usize; 3], latent_dim: usize, rng: &mut impl Rng) -> Self {
        let mut b = NetBuilder::new(&image, rng).flatten();
        for h in FE_HIDDEN {
            b = b.linear(h).relu();
        }
        Self { net: b.linear(latent_dim).build() }
    }

    pub fn out_dim(&self) -> usize {
        self.net.output_shape[0]
    }

    pub fn embed(&self, x: &Tensor<T>) -> Tensor<T> {
        self.net.infer(x)
    }
}

/// Latents to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T: Float> {
    pub net: Net<T>,
}

impl<T: Float> ClassifierHead<T> {
    pub fn new(latent_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self { net: NetBuilder::new(&[latent_dim], rng).linear(HEAD_HIDDEN).relu().linear(classes).build() }
    }

    pub fn classes(&self) -> usize {
        self.net.output_shape[0]
    }

    pub fn in_dim(&self) -> usize {
        self.net.input_shape[0]
    }

    pub fn logits(&self, z: &Tensor<T>) -> Tensor<T> {
        self.net.infer(z)
    }
}

/// Dataset images (stored in `[0, 1]`) in the range the bundle generates.
pub fn model_input<T: Float>(kind: BundleKind, images: &Tensor<f32>) -> Tensor<T> {
    match kind {
        BundleKind::Vae => images.cast(),
        BundleKind::Gan => to_signed(images).cast(),
    }
}

/// Self-consistent `(z, x)` pairs: `x` is the global net's eval-mode decode
/// of `z`, drawn for `tasks` (one row per entry).
pub fn latent_pairs<T: Float>(bundle: &GenerativeBundle<T>, tasks: &[usize], rng: &mut impl Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    if let Some(&t) = tasks.iter().find(|&&t| t >= bundle.tasks_seen) {
        return Err(Error::Contract(format!("task {t} not seen yet ({} tasks seen)", bundle.tasks_seen)));
    }
    let (cont, bin) = bundle.sample_sources(rng, tasks);
    let z = bundle.translate(&cont, bin.as_ref(), tasks);
    let x = bundle.global.net.infer(&z);
    Ok((z, x))
}

fn seen_tasks(bundle_tasks: usize, per_task: usize) -> Vec<usize> {
    (0..bundle_tasks).flat_map(|t| std::iter::repeat_n(t, per_task)).collect()
}

/// Mean over rows of the squared error summed over latent dims.
pub fn fe_loss<T: Float>(fe: &Net<T>, bound: &crate::nn::Bound<T>, x: &Tensor<T>, z: &Tensor<T>) -> Var<T> {
    let n = x.shape()[0];
    let pred = fe.forward(bound, &Var::constant(x.clone()), true);
    pred.sub(&Var::constant(z.clone())).square().sum().scale(T::of(1.0 / n as f64))
}

/// Fit `fe` to map generations back to their latents for every task seen.
/// Returns the per-epoch mean loss.
pub fn train_feature_extractor<T: Float>(
    bundle: &GenerativeBundle<T>,
    fe: &mut FeatureExtractor<T>,
    cfg: &ClassifierConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<Vec<f64>> {
    if fe.out_dim() != bundle.latent_dim() {
        return Err(Error::Contract(format!(
            "feature extractor emits {} dims but the bundle's latent space has {}",
            fe.out_dim(),
            bundle.latent_dim()
        )));
    }
    let task_ids = seen_tasks(bundle.tasks_seen, cfg.samples_per_task);
    let (z, x) = latent_pairs(bundle, &task_ids, rng)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, cfg.decay));
    let mut curve = Vec::with_capacity(cfg.fe_epochs);
    let task = bundle.tasks_seen.saturating_sub(1);
    for epoch in 0..cfg.fe_epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in batches(rng, task_ids.len(), cfg.batch) {
            let b = fe.net.bind(true);
            let loss = fe_loss(&fe.net, &b, &x.select_rows(&idx), &z.select_rows(&idx));
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("feature extractor loss diverged at epoch {epoch}")));
            }
            let g = grad_values(&loss, &b.leaves());
            opt.step(&mut [&mut fe.net], &g);
            sum += lv * idx.len() as f64;
            count += idx.len();
        }
        opt.end_epoch();
        let mean = sum / count.max(1) as f64;
        curve.push(mean);
        log(&EpochLog { stage: "feature_extractor", task, epoch, loss: mean, extra: vec![] });
    }
    Ok(curve)
}

/// Labelled latents assembled for one head-training round.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrainingSet<T: Float> {
    pub z: Tensor<T>,
    pub labels: Vec<usize>,
    /// Leading rows that came from real current-task images.
    pub real_rows: usize,
}

impl<T: Float> HeadTrainingSet<T> {
    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Previous-head state used to pseudo-label replayed generations.
pub struct PreviousClassifier<'a, T: Float> {
    pub fe: &'a FeatureExtractor<T>,
    pub head: &'a ClassifierHead<T>,
}

/// Labelled latents for the head. The first task uses `fe(real x)` with
/// ground-truth labels. Later tasks use sampled latents of every previous
/// task, labelled by the previous classifier applied to their decodes, plus
/// current-task latents chosen by `cfg.current_source`.
#[allow(clippy::too_many_arguments)]
pub fn head_training_set<T: Float>(
    bundle: &GenerativeBundle<T>,
    fe: &FeatureExtractor<T>,
    images: &Tensor<T>,
    labels: &[usize],
    current_task: usize,
    prev: Option<PreviousClassifier<'_, T>>,
    cfg: &ClassifierConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<HeadTrainingSet<T>> {
    if images.shape()[0] != labels.len() {
        return Err(Error::Contract(format!("{} images but {} labels", images.shape()[0], labels.len())));
    }
    let z_real = fe.embed(images);
    if current_task == 0 {
        return Ok(HeadTrainingSet { z: z_real, labels: labels.to_vec(), real_rows: labels.len() });
    }
    let Some(prev) = prev else {
        return Err(Error::Config(format!(
            "task {current_task} needs labels for replayed tasks but no previous classifier was given"
        )));
    };
    let (z_gen, x_gen) = latent_pairs(bundle, &seen_tasks(current_task, cfg.samples_per_task), rng)?;
    let replay_labels = predict(prev.fe, prev.head, &x_gen).classes;
    match cfg.current_source {
        CurrentSource::Real => {
            let mut all = labels.to_vec();
            all.extend(replay_labels);
            Ok(HeadTrainingSet { z: Tensor::cat_rows(&[&z_real, &z_gen]), labels: all, real_rows: labels.len() })
        }
        CurrentSource::Generated => {
            let classes = prev.head.classes();
            let mut provisional = ClassifierHead::new(fe.out_dim(), classes, rng);
            fit_classifier(&mut provisional.net, &z_real, labels, cfg.head_epochs, cfg, "provisional_head", current_task, rng, log)?;
            let ids = vec![current_task; cfg.samples_per_task];
            let (z_cur, x_cur) = latent_pairs(bundle, &ids, rng)?;
            let mut all = replay_labels;
            all.extend(softmax_argmax(&provisional.logits(&fe.embed(&x_cur))).classes);
            Ok(HeadTrainingSet { z: Tensor::cat_rows(&[&z_gen, &z_cur]), labels: all, real_rows: 0 })
        }
    }
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy<T: Float>(logits: &Var<T>, labels: &[usize]) -> Var<T> {
    let (n, c) = logits.value().dims2();
    let mut onehot = vec![T::zero(); n * c];
    for (r, &y) in labels.iter().enumerate() {
        onehot[r * c + y] = T::one();
    }
    logits.log_softmax().mul(&Var::constant(Tensor::from_vec(&[n, c], onehot))).sum().scale(T::of(-1.0 / n as f64))
}

/// Plain supervised training of `net` on `(inputs, labels)`.
#[allow(clippy::too_many_arguments)]
pub fn fit_classifier<T: Float>(
    net: &mut Net<T>,
    inputs: &Tensor<T>,
    labels: &[usize],
    epochs: usize,
    cfg: &ClassifierConfig,
    stage: &'static str,
    task: usize,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<Vec<f64>> {
    let classes = net.output_shape[0];
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {y} out of range for {classes} classes")));
    }
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, cfg.decay));
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in batches(rng, labels.len(), cfg.batch) {
            let b = net.bind(true);
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = net.forward(&b, &Var::constant(inputs.select_rows(&idx)), true);
            let loss = cross_entropy(&logits, &ys);
            let lv = loss.item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("{stage} loss diverged at epoch {epoch}")));
            }
            let g = grad_values(&loss, &b.leaves());
            opt.step(&mut [&mut *net], &g);
            sum += lv * idx.len() as f64;
            count += idx.len();
        }
        opt.end_epoch();
        let mean = sum / count.max(1) as f64;
        curve.push(mean);
        log(&EpochLog { stage, task, epoch, loss: mean, extra: vec![] });
    }
    Ok(curve)
}

/// Train `head` on the latents from [`head_training_set`].
#[allow(clippy::too_many_arguments)]
pub fn train_classifier_head<T: Float>(
    bundle: &GenerativeBundle<T>,
    fe: &FeatureExtractor<T>,
    head: &mut ClassifierHead<T>,
    images: &Tensor<T>,
    labels: &[usize],
    current_task: usize,
    prev: Option<PreviousClassifier<'_, T>>,
    cfg: &ClassifierConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<HeadTrainingSet<T>> {
    if head.in_dim() != fe.out_dim() {
        return Err(Error::Contract(format!("head takes {} dims, extractor emits {}", head.in_dim(), fe.out_dim())));
    }
    let set = head_training_set(bundle, fe, images, labels, current_task, prev, cfg, rng, log)?;
    fit_classifier(&mut head.net, &set.z, &set.labels, cfg.head_epochs, cfg, "classifier_head", current_task, rng, log)?;
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    /// Row-major `[n, C]` softmax probabilities.
    pub probs: Vec<f64>,
}

fn softmax_argmax<T: Float>(logits: &Tensor<T>) -> Prediction {
    let (n, c) = logits.dims2();
    let mut probs = Vec::with_capacity(n * c);
    let mut classes = Vec::with_capacity(n);
    for r in 0..n {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut best = 0;
        for (j, v) in e.iter().enumerate() {
            if *v > e[best] {
                best = j;
            }
            probs.push(v / s);
        }
        classes.push(best);
    }
    Prediction { classes, probs }
}

/// `argmax softmax(head(fe(x)))`.
pub fn predict<T: Float>(fe: &FeatureExtractor<T>, head: &ClassifierHead<T>, x: &Tensor<T>) -> Prediction {
    softmax_argmax(&head.logits(&fe.embed(x)))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// No-replay reference: one network with the extractor's and the head's
/// layers, fine-tuned on each task's real data in turn.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneClassifier<T: Float> {
    pub net: Net<T>,
}

impl<T: Float> FinetuneClassifier<T> {
    pub fn new(image: [usize; 3], latent_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut b = NetBuilder::new(&image, rng).flatten();
        for h in FE_HIDDEN {
            b = b.linear(h).relu();
        }
        Self { net: b.linear(latent_dim).linear(HEAD_HIDDEN).relu().linear(classes).build() }
    }

    pub fn train_task(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        task: usize,
        cfg: &ClassifierConfig,
        rng: &mut impl Rng,
        log: &mut Logger<'_>,
    ) -> Result<Vec<f64>> {
        fit_classifier(&mut self.net, images, labels, cfg.head_epochs, cfg, "finetune", task, rng, log)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Prediction {
        softmax_argmax(&self.net.infer(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_are_normalized() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -50.0, 0.0, 50.0]);
        let p = softmax_argmax(&logits);
        assert_eq!(p.classes, vec![2, 2]);
        for r in 0..2 {
            let s: f64 = p.probs[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_c() {
        let l = Var::constant(Tensor::<f64>::zeros(&[4, 5]));
        let ce = cross_entropy(&l, &[0, 1, 2, 3]);
        assert!((ce.item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn head_fits_separable_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = ClassifierHead::<f64>::new(2, 2, &mut rng);
        let mut z = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            z.extend([s * (1.0 + 0.05 * i as f64), 0.3 * (i % 7) as f64 - 1.0]);
            y.push(i % 2);
        }
        let z = Tensor::from_vec(&[40, 2], z);
        let cfg = ClassifierConfig { batch: 8, ..Default::default() };
        fit_classifier(&mut head.net, &z, &y, 60, &cfg, "t", 0, &mut rng, &mut |_| {}).unwrap();
        let pred = softmax_argmax(&head.logits(&z));
        assert_eq!(accuracy(&pred.classes, &y), 1.0);
    }
}
