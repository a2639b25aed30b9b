//! Translator-based consolidation of per-task models into one global model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_values, no_grad, Var};
use crate::error::{Error, Result};
use crate::models::{leaves, Module, Pipeline};
use crate::nn::{Adam, AdamConfig, Bound, Net};
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::vae::{batches, encode_var, sample_latent, BinaryPrior, EpochLog, Logger, SampleMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Vae,
    Gan,
}

/// State persisted between tasks: one translator, one global decoder or
/// generator, and (VAE) one binary prior per task.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeBundle<T: Float> {
    pub kind: BundleKind,
    pub global: Pipeline<T>,
    pub tasks_seen: usize,
    pub priors: Vec<BinaryPrior>,
}

impl<T: Float> GenerativeBundle<T> {
    pub fn cont_dim(&self) -> usize {
        self.global.translator.spec.cont_dim
    }

    pub fn bin_dim(&self) -> usize {
        self.global.translator.spec.bin_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.global.translator.out_dim()
    }

    /// Random sources for the given task ids: `N(0, I)` continuous part and,
    /// when the binary latent is on, bits drawn from that task's prior.
    pub fn sample_sources(&self, rng: &mut impl Rng, tasks: &[usize]) -> (Tensor<T>, Option<Tensor<T>>) {
        let n = tasks.len();
        let cont = rng::normal(rng, &[n, self.cont_dim()]);
        let d = self.bin_dim();
        let bin = (d > 0).then(|| {
            let mut v = Vec::with_capacity(n * d);
            for &t in tasks {
                let row = rng::bernoulli_rows::<T>(rng, 1, &self.priors[t].probs);
                v.extend_from_slice(row.data());
            }
            Tensor::from_vec(&[n, d], v)
        });
        (cont, bin)
    }

    /// Global latents `t(source, task)`.
    pub fn translate(&self, cont: &Tensor<T>, bin: Option<&Tensor<T>>, tasks: &[usize]) -> Tensor<T> {
        self.global.translator.infer(cont, bin, tasks)
    }

    /// Eval-mode decode of explicit sources.
    pub fn generate(&self, cont: &Tensor<T>, bin: Option<&Tensor<T>>, tasks: &[usize]) -> Tensor<T> {
        self.global.infer(cont, bin, tasks)
    }
}

/// Draw `n` images, task ids uniform over seen tasks unless `task` is fixed.
pub fn sample_global<T: Float>(
    bundle: &GenerativeBundle<T>,
    n: usize,
    rng: &mut impl Rng,
    task: Option<usize>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if bundle.tasks_seen == 0 {
        return Err(Error::Contract("cannot sample from a bundle that has seen no tasks".into()));
    }
    if let Some(t) = task {
        if t >= bundle.tasks_seen {
            return Err(Error::Contract(format!("task {t} not seen yet ({} tasks seen)", bundle.tasks_seen)));
        }
    }
    let tasks: Vec<usize> = (0..n).map(|_| task.unwrap_or_else(|| rng.random_range(0..bundle.tasks_seen))).collect();
    let (cont, bin) = bundle.sample_sources(rng, &tasks);
    if n == 0 {
        let mut shape = vec![0];
        shape.extend_from_slice(&bundle.global.net.output_shape);
        return Ok((Tensor::zeros(&shape), tasks));
    }
    Ok((bundle.generate(&cont, bin.as_ref(), &tasks), tasks))
}

/// Rehearsal pairs stored column-wise: row `j` is the pair
/// `(cont[j], bin[j], tasks[j]) -> targets[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RehearsalSet<T: Float> {
    pub cont: Tensor<T>,
    pub bin: Option<Tensor<T>>,
    pub tasks: Vec<usize>,
    pub targets: Tensor<T>,
    pub substituted: Vec<bool>,
}

impl<T: Float> RehearsalSet<T> {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Pairs for every previous task `l < current_task`, `per_task` each, with
/// targets from the frozen bundle.
pub fn build_rehearsal_set<T: Float>(
    frozen: &GenerativeBundle<T>,
    current_task: usize,
    per_task: usize,
    rng: &mut impl Rng,
) -> Result<RehearsalSet<T>> {
    let tasks: Vec<usize> = (0..current_task).flat_map(|l| std::iter::repeat_n(l, per_task)).collect();
    rehearsal_for_tasks(frozen, &tasks, rng)
}

fn rehearsal_for_tasks<T: Float>(
    frozen: &GenerativeBundle<T>,
    tasks: &[usize],
    rng: &mut impl Rng,
) -> Result<RehearsalSet<T>> {
    if let Some(&t) = tasks.iter().max() {
        if t >= frozen.tasks_seen {
            return Err(Error::Contract(format!(
                "rehearsal for task {t} requested but the bundle has seen {} tasks",
                frozen.tasks_seen
            )));
        }
    }
    let (cont, bin) = frozen.sample_sources(rng, tasks);
    let targets = if tasks.is_empty() {
        let mut shape = vec![0];
        shape.extend_from_slice(&frozen.global.net.output_shape);
        Tensor::zeros(&shape)
    } else {
        frozen.generate(&cont, bin.as_ref(), tasks)
    };
    Ok(RehearsalSet { cont, bin, tasks: tasks.to_vec(), targets, substituted: vec![false; tasks.len()] })
}

/// Current-task embeddings in the global latent space, plus which source row
/// each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalLatentSet<T: Float> {
    pub vectors: Tensor<T>,
    pub rows: Vec<usize>,
}

/// `t(encode(x) in eval mode, task)` for every row of `x`.
pub fn encode_to_global<T: Float>(
    translator_owner: &GenerativeBundle<T>,
    encoder: &Net<T>,
    cont_dim: usize,
    x: &Tensor<T>,
    task: usize,
) -> Result<GlobalLatentSet<T>> {
    let (mu, bin) = {
        let v = crate::vae::encode(encoder, x, cont_dim)?;
        let bin = (v.mu_p.shape()[1] > 0).then(|| v.mu_p.map(|p| p.round()));
        (v.mu, bin)
    };
    let n = x.shape()[0];
    let vectors = translator_owner.translate(&mu, bin.as_ref(), &vec![task; n]);
    Ok(GlobalLatentSet { vectors, rows: (0..n).collect() })
}

impl<T: Float> GlobalLatentSet<T> {
    /// Keep at most `max` rows, chosen uniformly without replacement.
    pub fn subsample(self, max: usize, rng: &mut impl Rng) -> Self {
        if self.rows.len() <= max {
            return self;
        }
        let mut pick = rng::permutation(rng, self.rows.len());
        pick.truncate(max);
        pick.sort_unstable();
        Self { vectors: self.vectors.select_rows(&pick), rows: pick.iter().map(|&i| self.rows[i]).collect() }
    }
}

fn normalized_rows<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (n, d) = t.dims2();
    let mut v = t.data().to_vec();
    for r in 0..n {
        let row = &mut v[r * d..(r + 1) * d];
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        let inv = if norm > T::zero() { norm.recip() } else { T::zero() };
        row.iter_mut().for_each(|x| *x *= inv);
    }
    Tensor::from_vec(&[n, d], v)
}

/// For each query row, the largest cosine similarity to any key row and the
/// key index attaining it. Zero-norm vectors have similarity 0 to everything.
pub fn max_cosine<T: Float>(queries: &Tensor<T>, keys: &Tensor<T>) -> (Vec<f64>, Vec<usize>) {
    let (nq, _) = queries.dims2();
    let (nk, _) = keys.dims2();
    if nq == 0 || nk == 0 {
        return (vec![0.0; nq], vec![0; nq]);
    }
    let sims = normalized_rows(queries).matmul(&normalized_rows(keys), false, true);
    let mut best = Vec::with_capacity(nq);
    let mut arg = Vec::with_capacity(nq);
    for r in 0..nq {
        let (i, v) = sims.row(r).iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            let v = v.as_f64();
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
        best.push(v.clamp(-1.0, 1.0));
        arg.push(i);
    }
    (best, arg)
}

/// Replace rehearsal targets whose global embedding is within cosine `gamma`
/// of some current-task embedding by that task's original image.
pub fn controlled_forgetting<T: Float>(
    pairs: &mut RehearsalSet<T>,
    embeddings: &Tensor<T>,
    current: &GlobalLatentSet<T>,
    current_images: &Tensor<T>,
    gamma: f64,
) -> usize {
    if pairs.is_empty() || current.rows.is_empty() {
        return 0;
    }
    let (sim, arg) = max_cosine(embeddings, &current.vectors);
    let per = pairs.targets.len() / pairs.len();
    let mut count = 0;
    let targets = pairs.targets.data_mut();
    for (j, (&s, &a)) in sim.iter().zip(&arg).enumerate() {
        if s >= gamma {
            let src = current.rows[a];
            targets[j * per..(j + 1) * per].copy_from_slice(current_images.row(src));
            pairs.substituted[j] = true;
            count += 1;
        }
    }
    count
}

/// Per-sample squared error summed over pixels, averaged over the batch.
pub fn reconstruction_sse<T: Float>(out: &Var<T>, target: &Tensor<T>) -> Var<T> {
    let n = target.shape()[0];
    out.flatten()
        .sub(&Var::constant(target.reshape(&[n, target.len() / n.max(1)])))
        .square()
        .sum()
        .scale(T::of(1.0 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Controlled-forgetting threshold; `None` disables substitution.
    pub gamma: Option<f64>,
    pub max_similarity_rows: usize,
    pub temperature: f64,
}

/// What the local stage hands to consolidation.
pub enum LocalModel<'a, T: Float> {
    /// Frozen encoder plus the local translator/decoder.
    Vae { encoder: &'a Net<T>, pipeline: &'a Pipeline<T>, prior: BinaryPrior },
    /// Local generative path (translator + generator).
    Gan { generator: &'a Pipeline<T> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationStats {
    pub phase1_losses: Vec<f64>,
    pub phase2_losses: Vec<f64>,
    pub max_rehearsal_per_batch: usize,
    pub rehearsal_cap: usize,
    pub substituted: usize,
    pub rehearsed: usize,
    pub global_unchanged_after_phase1: bool,
}

/// Rehearsal samples per mini-batch: one batch per previous task, capped at
/// `batch * num_tasks * 0.5`.
pub fn rehearsal_per_batch(batch: usize, num_tasks: usize) -> usize {
    let prev = num_tasks.saturating_sub(1);
    (batch * prev).min(batch * num_tasks / 2)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    TranslatorOnly,
    Joint,
}

struct Current<'a, T: Float> {
    local: &'a LocalModel<'a, T>,
    images: &'a Tensor<T>,
    task: usize,
    latents: Option<GlobalLatentSet<T>>,
}

impl<T: Float> Current<'_, T> {
    fn count(&self) -> usize {
        self.images.shape()[0]
    }

    /// Sources and targets for a current-task mini-batch.
    fn batch(&self, idx: &[usize], temperature: f64, rng: &mut impl Rng) -> (Tensor<T>, Option<Tensor<T>>, Tensor<T>) {
        let _g = no_grad();
        match self.local {
            LocalModel::Vae { encoder, pipeline, .. } => {
                let x = self.images.select_rows(idx);
                let b = encoder.bind(false);
                let cont_dim = pipeline.translator.spec.cont_dim;
                let out = encode_var(encoder, &b, &Var::constant(x.clone()), cont_dim, false);
                let lat = sample_latent(&out, temperature, SampleMode::Train, rng);
                (lat.cont.value().clone(), lat.bin.map(|v| v.value().clone()), x)
            }
            LocalModel::Gan { generator } => {
                let dim = generator.translator.spec.cont_dim;
                let xi: Tensor<T> = rng::normal(rng, &[idx.len(), dim]);
                let x = generator.infer(&xi, None, &vec![self.task; idx.len()]);
                (xi, None, x)
            }
        }
    }
}

fn cat_opt<T: Float>(a: Option<Tensor<T>>, b: Option<&Tensor<T>>) -> Option<Tensor<T>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(Tensor::cat_rows(&[&a, b])),
        (a, _) => a,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_phase<T: Float>(
    bundle: &mut GenerativeBundle<T>,
    frozen: &GenerativeBundle<T>,
    current: &Current<'_, T>,
    phase: Phase,
    epochs: usize,
    cfg: &ConsolidationConfig,
    stats: &mut ConsolidationStats,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<Vec<f64>> {
    let k = current.task + 1;
    let per_batch = rehearsal_per_batch(cfg.batch, k);
    stats.rehearsal_cap = cfg.batch * k / 2;
    let adam = AdamConfig::new(cfg.lr, cfg.decay).with_betas(cfg.beta1, cfg.beta2);
    let mut opt = Adam::new(adam);
    let mut losses = Vec::with_capacity(epochs);
    let joint = phase == Phase::Joint;
    let stage = if joint { "global_joint" } else { "global_translator" };
    for epoch in 0..epochs {
        let (mut sum, mut seen) = (0.0, 0usize);
        for (step, idx) in batches(rng, current.count(), cfg.batch).into_iter().enumerate() {
            let (c_cont, c_bin, c_x) = current.batch(&idx, cfg.temperature, rng);
            let r = if idx.len() == cfg.batch { per_batch } else { per_batch * idx.len() / cfg.batch };
            let offset = if k > 1 { rng.random_range(0..k - 1) } else { 0 };
            let tasks: Vec<usize> = (0..r).map(|j| (offset + j) % (k - 1).max(1)).collect();
            let mut reh = rehearsal_for_tasks(frozen, &tasks, rng)?;
            if let (true, Some(gamma), Some(latents)) = (joint, cfg.gamma, current.latents.as_ref()) {
                if !reh.is_empty() {
                    let z = bundle.translate(&reh.cont, reh.bin.as_ref(), &reh.tasks);
                    stats.substituted += controlled_forgetting(&mut reh, &z, latents, current.images, gamma);
                }
            }
            stats.max_rehearsal_per_batch = stats.max_rehearsal_per_batch.max(reh.len());
            stats.rehearsed += reh.len();
            let mut all_tasks = vec![current.task; idx.len()];
            all_tasks.extend_from_slice(&reh.tasks);
            let cont = Tensor::cat_rows(&[&c_cont, &reh.cont]);
            let bin = cat_opt(c_bin, reh.bin.as_ref());
            let targets = Tensor::cat_rows(&[&c_x, &reh.targets]);

            let (loss, grads, bounds) = {
                let tb = bundle.global.translator.bind(true);
                let nb = bundle.global.net.bind(joint);
                let mut bounds = tb;
                bounds.push(nb);
                let bin_v = bin.map(Var::constant);
                let out = bundle.global.forward(&bounds, &Var::constant(cont), bin_v.as_ref(), &all_tasks, joint);
                let loss = reconstruction_sse(&out, &targets);
                let grads = grad_values(&loss, &leaves(&bounds));
                (loss.item().as_f64(), grads, bounds)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "{stage} loss diverged (task {}, epoch {epoch}, step {step})",
                    current.task
                )));
            }
            if joint {
                opt.step(&mut bundle.global.nets_mut(), &grads);
                bundle.global.apply_stats(&bounds);
            } else {
                opt.step(&mut bundle.global.translator.nets_mut(), &grads);
            }
            sum += loss * targets.shape()[0] as f64;
            seen += targets.shape()[0];
        }
        opt.end_epoch();
        let l = sum / seen.max(1) as f64;
        losses.push(l);
        log(&EpochLog { stage, task: current.task, epoch, loss: l, extra: vec![("substituted", stats.substituted as f64)] });
    }
    Ok(losses)
}

/// Phase 1: fit the translator only, global decoder/generator frozen (eval mode).
#[allow(clippy::too_many_arguments)]
pub fn train_translator_phase1<T: Float>(
    bundle: &mut GenerativeBundle<T>,
    frozen: &GenerativeBundle<T>,
    local: &LocalModel<'_, T>,
    images: &Tensor<T>,
    task: usize,
    cfg: &ConsolidationConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<ConsolidationStats> {
    let mut stats = ConsolidationStats::default();
    let cur = Current { local, images, task, latents: None };
    let before = bundle.global.net.params.clone();
    if !bundle.global.translator.nets().is_empty() {
        stats.phase1_losses =
            run_phase(bundle, frozen, &cur, Phase::TranslatorOnly, cfg.phase1_epochs, cfg, &mut stats, rng, log)?;
    }
    stats.global_unchanged_after_phase1 = before.bit_eq(&bundle.global.net.params);
    if !stats.global_unchanged_after_phase1 {
        return Err(Error::Contract("global model changed while frozen".into()));
    }
    Ok(stats)
}

/// Phase 2: translator and global model jointly. Advances `tasks_seen`.
#[allow(clippy::too_many_arguments)]
pub fn train_joint_phase2<T: Float>(
    bundle: &mut GenerativeBundle<T>,
    frozen: &GenerativeBundle<T>,
    local: &LocalModel<'_, T>,
    images: &Tensor<T>,
    task: usize,
    latents: Option<GlobalLatentSet<T>>,
    cfg: &ConsolidationConfig,
    stats: &mut ConsolidationStats,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<()> {
    let cur = Current { local, images, task, latents };
    stats.phase2_losses = run_phase(bundle, frozen, &cur, Phase::Joint, cfg.phase2_epochs, cfg, stats, rng, log)?;
    bundle.tasks_seen = task + 1;
    Ok(())
}

/// Full consolidation of task `task`. Task 0 installs the local generative
/// path as the global one.
pub fn consolidate_task<T: Float>(
    bundle: Option<GenerativeBundle<T>>,
    local: LocalModel<'_, T>,
    images: &Tensor<T>,
    task: usize,
    cfg: &ConsolidationConfig,
    rng: &mut impl Rng,
    log: &mut Logger<'_>,
) -> Result<(GenerativeBundle<T>, ConsolidationStats)> {
    let (kind, prior, pipeline) = match &local {
        LocalModel::Vae { pipeline, prior, .. } => (BundleKind::Vae, Some(prior.clone()), *pipeline),
        LocalModel::Gan { generator } => (BundleKind::Gan, None, *generator),
    };
    let Some(mut bundle) = bundle else {
        if task != 0 {
            return Err(Error::Contract(format!("no global model to consolidate task {task} into")));
        }
        let b = GenerativeBundle { kind, global: pipeline.clone(), tasks_seen: 1, priors: prior.into_iter().collect() };
        return Ok((b, ConsolidationStats { global_unchanged_after_phase1: true, ..Default::default() }));
    };
    if bundle.tasks_seen != task {
        return Err(Error::Contract(format!(
            "bundle has seen {} tasks but task {task} is being consolidated",
            bundle.tasks_seen
        )));
    }
    if bundle.kind != kind {
        return Err(Error::Contract("local model kind does not match the bundle".into()));
    }
    if let Some(p) = prior {
        bundle.priors.push(p);
    }
    let frozen = bundle.clone();
    let mut stats = train_translator_phase1(&mut bundle, &frozen, &local, images, task, cfg, rng, log)?;
    let latents = match (&local, cfg.gamma) {
        (LocalModel::Vae { encoder, .. }, Some(_)) => {
            let cont_dim = bundle.cont_dim();
            let set = encode_to_global(&bundle, encoder, cont_dim, images, task)?;
            Some(set.subsample(cfg.max_similarity_rows, rng))
        }
        _ => None,
    };
    train_joint_phase2(&mut bundle, &frozen, &local, images, task, latents, cfg, &mut stats, rng, log)?;
    Ok((bundle, stats))
}

/// Loss used by both phases on an explicit batch (exposed for gradient checks).
pub fn phase_loss<T: Float>(
    global: &Pipeline<T>,
    bounds: &[Bound<T>],
    cont: &Tensor<T>,
    bin: Option<&Tensor<T>>,
    tasks: &[usize],
    targets: &Tensor<T>,
    train: bool,
) -> Var<T> {
    let bin = bin.map(|b| Var::constant(b.clone()));
    let out = global.forward(bounds, &Var::constant(cont.clone()), bin.as_ref(), tasks, train);
    reconstruction_sse(&out, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_follows_the_half_rule() {
        assert_eq!(rehearsal_per_batch(64, 1), 0);
        assert_eq!(rehearsal_per_batch(64, 2), 64);
        assert_eq!(rehearsal_per_batch(64, 5), 160);
        for k in 1..12 {
            assert!(rehearsal_per_batch(64, k) <= 64 * k / 2);
        }
    }

    #[test]
    fn cosine_edge_cases() {
        let q = Tensor::<f64>::from_vec(&[3, 2], vec![1., 0., 0., 0., 2., 2.]);
        let k = Tensor::<f64>::from_vec(&[2, 2], vec![0., 3., 1., 1.]);
        let (s, a) = max_cosine(&q, &k);
        assert!((s[0] - 0.5f64.sqrt()).abs() < 1e-12 && a[0] == 1);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 1.0).abs() < 1e-12 && a[2] == 1);
    }
}
