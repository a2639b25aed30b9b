//! Experiment driver: per-task loop, artifacts, resume and the ablation ladder.
//!
//! Each seed runs in its own directory `<out_dir>/<hash>_s<seed>`. A task
//! runs local training, consolidation (or the replay step), the optional
//! classifier stage and evaluation, then writes its checkpoint, the sample
//! grid and the metrics files so far.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::alignment::{consolidate_task, sample_global, BundleKind, ConsolidationStats, GenerativeBundle, LocalModel};
use crate::baseline::{train_gr_task, GrModel, GrStats};
use crate::checkpoint::{self, BundleMeta};
use crate::classifier::{
    accuracy, model_input, predict, train_classifier_head, train_feature_extractor, ClassifierHead, FeatureExtractor,
    FinetuneClassifier, PreviousClassifier,
};
use crate::config::{image_shape, ExperimentConfig, Method};
use crate::data::{
    concat_datasets, load_dataset, split_class_incremental, split_dirichlet, split_sequential, split_toy,
    test_indices_for, to_signed, to_unit, Dataset, Policy, Split, TaskStream,
};
use crate::error::{Error, Result};
use crate::gan::{train_local_gan, GanModel};
use crate::metrics::{feature_net_cached, score_task, FeatureNet, MetricsReport, MetricsRow};
use crate::models::{gan_critic, gan_generator, vae_decoder, vae_encoder, Pipeline, Translator};
use crate::nn::Net;
use crate::rng::{self, tag, Rng64};
use crate::tensor::Tensor;
use crate::vae::{encode, train_local_vae, EpochLog, LocalVae};

// ----- paths and logs -------------------------------------------------------

/// Every artifact of one `(config, seed)` run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub tag: String,
}

impl RunPaths {
    pub fn new(out_dir: &Path, short_hash: &str, seed: u64) -> Self {
        let tag = format!("{short_hash}_s{seed}");
        Self { dir: out_dir.join(&tag), tag }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.dir.join("samples")
    }

    /// Task numbers in file names start at 1.
    pub fn bundle(&self, task: usize) -> PathBuf {
        self.checkpoints().join(format!("task_{:02}.bundle", task + 1))
    }

    /// Resume-only state that is not part of the bundle.
    pub fn local_state(&self, task: usize) -> PathBuf {
        self.checkpoints().join(format!("task_{:02}.local", task + 1))
    }

    pub fn grid(&self, task: usize) -> PathBuf {
        self.samples().join(format!("task_{:02}.png", task + 1))
    }

    pub fn noise(&self) -> PathBuf {
        self.samples().join("noise.safetensors")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join(format!("metrics_{}.csv", self.tag))
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.dir.join(format!("metrics_{}.json", self.tag))
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("run.log")
    }

    pub fn jsonl(&self) -> PathBuf {
        self.dir.join("run.jsonl")
    }

    pub fn error(&self) -> PathBuf {
        self.dir.join("error.json")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn stream(&self) -> PathBuf {
        self.dir.join("tasks.json")
    }
}

/// Plain-text and JSON-lines loss log. No timestamps, so reruns write the
/// same bytes.
pub struct RunLog {
    text: BufWriter<File>,
    json: BufWriter<File>,
    echo: bool,
}

impl RunLog {
    fn open(paths: &RunPaths, append: bool, echo: bool) -> Result<Self> {
        let open = |p: PathBuf| -> Result<BufWriter<File>> {
            let f = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&p)?;
            Ok(BufWriter::new(f))
        };
        Ok(Self { text: open(paths.log())?, json: open(paths.jsonl())?, echo })
    }

    pub fn epoch(&mut self, e: &EpochLog) {
        let mut line = format!("task={} stage={} epoch={} loss={:.6}", e.task + 1, e.stage, e.epoch + 1, e.loss);
        for (k, v) in &e.extra {
            line.push_str(&format!(" {k}={v:.6}"));
        }
        self.line(&line);
        let mut obj = serde_json::json!({ "task": e.task + 1, "stage": e.stage, "epoch": e.epoch + 1, "loss": e.loss });
        for (k, v) in &e.extra {
            obj[*k] = serde_json::json!(v);
        }
        let _ = writeln!(self.json, "{obj}");
    }

    pub fn note(&mut self, msg: &str) {
        self.line(msg);
        let _ = writeln!(self.json, "{}", serde_json::json!({ "note": msg }));
    }

    fn line(&mut self, s: &str) {
        if self.echo {
            eprintln!("{s}");
        }
        let _ = writeln!(self.text, "{s}");
    }

    fn flush(&mut self) {
        let _ = self.text.flush();
        let _ = self.json.flush();
    }
}

// ----- data -----------------------------------------------------------------

/// Train/test data plus the task stream for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    /// Full train split, before any subsampling; trains the FID feature net.
    pub full_train: Dataset,
    pub stream: TaskStream,
}

impl Prepared {
    pub fn task_images(&self, t: usize) -> Tensor<f32> {
        self.train.images.select_rows(&self.stream.tasks[t].samples)
    }

    pub fn task_labels(&self, t: usize) -> Vec<usize> {
        self.stream.tasks[t].samples.iter().map(|&i| self.train.labels[i]).collect()
    }

    /// Test rows belonging to tasks `0..=t`, without duplicates.
    pub fn test_union(&self, t: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..=t).flat_map(|s| test_indices_for(&self.stream, &self.test, s)).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Test rows whose class appeared in tasks `0..=t`.
    pub fn test_seen_classes(&self, t: usize) -> Vec<usize> {
        let seen = self.stream.classes_seen(t);
        (0..self.test.len()).filter(|&i| seen.contains(&self.test.labels[i])).collect()
    }
}

/// Load the datasets named by `cfg` and split them for `seed`.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let s = &cfg.scenario;
    if s.policy == Policy::SequentialDatasets {
        let mut trains = Vec::new();
        let mut tests = Vec::new();
        for &d in &s.sequence {
            trains.push(load_dataset(d, &cfg.data_root, Split::Train)?);
            tests.push(load_dataset(d, &cfg.data_root, Split::Test)?);
        }
        let refs: Vec<&Dataset> = trains.iter().collect();
        let (train, stream) = split_sequential(&refs, s.num_tasks / s.sequence.len(), seed)?;
        let test = concat_datasets(&tests.iter().collect::<Vec<_>>())?;
        return Ok(Prepared { full_train: train.clone(), train, test, stream });
    }
    let full_train = load_dataset(cfg.dataset, &cfg.data_root, Split::Train)?;
    let test = load_dataset(cfg.dataset, &cfg.data_root, Split::Test)?;
    let train = match s.max_train {
        Some(n) if n < full_train.len() => {
            let mut r = rng::stream(seed, &[tag::SPLIT, 1]);
            let mut idx: Vec<usize> = rng::permutation(&mut r, full_train.len()).into_iter().take(n).collect();
            idx.sort_unstable();
            full_train.subset(&idx)
        }
        _ => full_train.clone(),
    };
    let stream = match s.policy {
        Policy::ClassIncremental => split_class_incremental(&train, s.num_tasks, seed)?,
        Policy::Dirichlet => split_dirichlet(&train, s.num_tasks, s.alpha.unwrap_or(1.0), seed)?,
        Policy::Toy => split_toy(&train, s.max_per_task.unwrap_or(3000), seed)?,
        Policy::SequentialDatasets => unreachable!("handled above"),
    };
    Ok(Prepared { train, test, full_train, stream })
}

// ----- model construction ---------------------------------------------------

fn stage_rng(seed: u64, stage: u64, task: usize) -> Rng64 {
    rng::stream(seed, &[stage, task as u64])
}

/// Fresh global pipeline (translator + decoder or generator) for `cfg`.
pub fn new_pipeline(cfg: &ExperimentConfig, image: [usize; 3], rng: &mut Rng64) -> Result<Pipeline<f32>> {
    let spec = cfg.translator_spec();
    let translator = Translator::new(spec, rng);
    let net = match cfg.method {
        Method::MultibandGan => gan_generator(cfg.gan.arch.expect("resolved"), image, spec.global_dim(), rng)?,
        _ => vae_decoder(cfg.vae_arch(), image, spec.global_dim(), rng)?,
    };
    Ok(Pipeline { translator, net })
}

pub fn new_local_vae(cfg: &ExperimentConfig, image: [usize; 3], warm: Option<&Pipeline<f32>>, rng: &mut Rng64) -> Result<LocalVae<f32>> {
    let spec = cfg.translator_spec();
    let encoder = vae_encoder(cfg.vae_arch(), image, spec.cont_dim, spec.bin_dim, rng)?;
    let pipeline = match warm {
        Some(p) => p.clone(),
        None => new_pipeline(cfg, image, rng)?,
    };
    Ok(LocalVae { encoder, pipeline, cont_dim: spec.cont_dim })
}

pub fn new_local_gan(cfg: &ExperimentConfig, image: [usize; 3], rng: &mut Rng64) -> Result<GanModel<f32>> {
    let generator = new_pipeline(cfg, image, rng)?;
    let critic = gan_critic(cfg.gan.arch.expect("resolved"), image, rng)?;
    Ok(GanModel { generator, critic, noise_dim: cfg.translator_spec().cont_dim })
}

pub fn new_gr(cfg: &ExperimentConfig, image: [usize; 3], rng: &mut Rng64) -> Result<GrModel<f32>> {
    let cont = cfg.vae.cont_dim.unwrap_or(8);
    let enc = vae_encoder(cfg.vae_arch(), image, cont, 0, rng)?;
    let dec = vae_decoder(cfg.vae_arch(), image, cont, rng)?;
    GrModel::new(enc, dec, cont, rng)
}

fn bundle_kind(method: Method) -> BundleKind {
    if method == Method::MultibandGan {
        BundleKind::Gan
    } else {
        BundleKind::Vae
    }
}

/// Empty bundle of the right architecture, to load a checkpoint into.
pub fn bundle_template(cfg: &ExperimentConfig, image: [usize; 3]) -> Result<GenerativeBundle<f32>> {
    let mut r = stage_rng(0, tag::INIT, 0);
    Ok(GenerativeBundle { kind: bundle_kind(cfg.method), global: new_pipeline(cfg, image, &mut r)?, tasks_seen: 0, priors: Vec::new() })
}

// ----- session --------------------------------------------------------------

pub enum ModelState {
    Multiband { bundle: Option<GenerativeBundle<f32>>, local_gan: Option<GanModel<f32>> },
    Gr { model: GrModel<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    pub fe: FeatureExtractor<f32>,
    pub head: ClassifierHead<f32>,
}

/// What a task's training stages reported, for inspection by callers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub consolidation: Option<ConsolidationStats>,
    pub gr_max_rehearsal_per_batch: Option<usize>,
    pub gr_rehearsal_cap: Option<usize>,
    /// Label counts of the classifier head's training set.
    pub head_label_counts: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionOptions {
    /// Echo log lines to stderr.
    pub echo: bool,
    /// Pick up from the last checkpoint in the run directory.
    pub resume: bool,
}

pub struct Session {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub hash: String,
    pub paths: RunPaths,
    pub data: Prepared,
    pub fnet: FeatureNet,
    pub model: ModelState,
    pub clf: Option<ClassifierState>,
    pub finetune: Option<FinetuneClassifier<f32>>,
    pub report: MetricsReport,
    pub next_task: usize,
    pub records: Vec<TaskRecord>,
    /// Encoder of the most recent local VAE. In memory only.
    pub last_encoder: Option<Net<f32>>,
    log: RunLog,
}

/// Feature net shared by all runs on the same data, cached under `out_dir`.
pub fn feature_net_for(cfg: &ExperimentConfig, data: &Prepared, echo: bool) -> Result<FeatureNet> {
    let fcfg = cfg.feature_net();
    let name = format!(
        "feature_net_{}_{}x{}_e{}_s{}.safetensors",
        data.full_train.name,
        data.full_train.len(),
        data.full_train.pixels(),
        fcfg.epochs,
        fcfg.seed
    );
    let path = cfg.out_dir.join("cache").join(name);
    let fnet = feature_net_cached(&path, &data.full_train, &data.test, &fcfg, &mut |e| {
        if echo {
            eprintln!("feature net epoch {} loss {:.4}", e.epoch + 1, e.loss);
        }
    })?;
    Ok(fnet)
}

impl Session {
    /// Validate, prepare data and the FID feature net, and either start a
    /// fresh run directory or resume the existing one.
    pub fn new(cfg: &ExperimentConfig, seed: u64, opts: SessionOptions) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let hash = cfg.hash()?;
        let paths = RunPaths::new(&cfg.out_dir, &hash[..12], seed);
        let data = prepare_data(&cfg, seed)?;
        let fnet = feature_net_for(&cfg, &data, opts.echo)?;
        let image = data.train.image_shape();
        if image != image_shape(cfg.dataset) && cfg.scenario.policy != Policy::SequentialDatasets {
            return Err(Error::Config(format!("dataset images are {image:?}, expected {:?}", image_shape(cfg.dataset))));
        }
        let resume_from = if opts.resume { last_checkpoint(&paths) } else { None };
        if resume_from.is_none() && paths.dir.exists() {
            // a fresh run replaces whatever an earlier run of this config left
            for p in [paths.checkpoints(), paths.samples()] {
                if p.exists() {
                    fs::remove_dir_all(&p)?;
                }
            }
            for p in [paths.error(), paths.metrics_csv(), paths.metrics_json()] {
                if p.exists() {
                    fs::remove_file(&p)?;
                }
            }
        }
        fs::create_dir_all(paths.checkpoints())?;
        fs::create_dir_all(paths.samples())?;
        fs::write(paths.config(), cfg.to_toml())?;
        data.stream.save(&paths.stream())?;
        let mut log = RunLog::open(&paths, resume_from.is_some(), opts.echo)?;

        let model = match cfg.method {
            Method::Gr => ModelState::Gr { model: new_gr(&cfg, image, &mut stage_rng(seed, tag::INIT, 0))? },
            _ => ModelState::Multiband { bundle: None, local_gan: None },
        };
        let report = MetricsReport {
            config_hash: hash.clone(),
            seed,
            num_tasks: data.stream.len(),
            samples_per_task: cfg.eval.samples,
            feature_net_accuracy: fnet.test_accuracy,
            feature_net_valid: fnet.passes_gate(),
            ..Default::default()
        };
        if !fnet.passes_gate() {
            log.note(&format!(
                "warning: feature net test accuracy {:.4} is below the gate; FID values are flagged invalid",
                fnet.test_accuracy
            ));
        }
        let mut s = Self {
            cfg,
            seed,
            hash,
            paths,
            data,
            fnet,
            model,
            clf: None,
            finetune: None,
            report,
            next_task: 0,
            records: Vec::new(),
            last_encoder: None,
            log,
        };
        if let Some(t) = resume_from {
            s.load_checkpoint(t)?;
            s.log.note(&format!("resumed after task {}", t + 1));
        }
        Ok(s)
    }

    pub fn num_tasks(&self) -> usize {
        self.data.stream.len()
    }

    pub fn is_done(&self) -> bool {
        self.next_task >= self.num_tasks()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.data.train.image_shape()
    }

    pub fn bundle(&self) -> Option<&GenerativeBundle<f32>> {
        match &self.model {
            ModelState::Multiband { bundle, .. } => bundle.as_ref(),
            ModelState::Gr { .. } => None,
        }
    }

    pub fn gr_model(&self) -> Option<&GrModel<f32>> {
        match &self.model {
            ModelState::Gr { model } => Some(model),
            ModelState::Multiband { .. } => None,
        }
    }

    /// Run every remaining task.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step_task()?;
        }
        Ok(())
    }

    /// Train, evaluate and checkpoint the next task. On failure an error
    /// record is written next to the partial artifacts.
    pub fn step_task(&mut self) -> Result<()> {
        let t = self.next_task;
        if t >= self.num_tasks() {
            return Err(Error::Contract("all tasks are already trained".into()));
        }
        let res = self.try_step(t);
        if let Err(e) = &res {
            self.log.note(&format!("task {} failed: {e}", t + 1));
            let _ = write_error_record(&self.paths.error(), e, Some(t), self.seed, &self.hash);
        }
        self.log.flush();
        res
    }

    fn try_step(&mut self, t: usize) -> Result<()> {
        let started = Instant::now();
        self.log.note(&format!("task {} of {}: {} samples", t + 1, self.num_tasks(), self.data.stream.tasks[t].samples.len()));
        let mut record = TaskRecord { task: t, ..Default::default() };
        self.train_generative(t, &mut record)?;
        if self.cfg.clf.enabled {
            self.classifier_stage(t, &mut record)?;
        }
        if self.cfg.eval.every_task || t + 1 == self.num_tasks() {
            self.evaluate(t)?;
        }
        self.emit_grid(t)?;
        self.save_checkpoint(t)?;
        self.next_task = t + 1;
        self.records.push(record);
        self.write_metrics()?;
        // wall time goes to stderr only; the log files stay reproducible
        if self.log.echo {
            eprintln!("task {} done in {:.1}s", t + 1, started.elapsed().as_secs_f64());
        }
        Ok(())
    }

    fn train_generative(&mut self, t: usize, record: &mut TaskRecord) -> Result<()> {
        let image = self.image_shape();
        let images = self.data.task_images(t);
        let Session { cfg, seed, model, log, last_encoder, .. } = self;
        let seed = *seed;
        let mut logf = |e: &EpochLog| log.epoch(e);
        match model {
            ModelState::Gr { model } => {
                let x = images;
                let stats: GrStats =
                    train_gr_task(model, &x, t, &cfg.gr_train(), &mut stage_rng(seed, tag::BASELINE, t), &mut logf)?;
                record.gr_max_rehearsal_per_batch = Some(stats.max_rehearsal_per_batch);
                record.gr_rehearsal_cap = Some(cfg.vae.batch * (t + 1) / 2);
            }
            ModelState::Multiband { bundle, local_gan } => {
                let mut init = stage_rng(seed, tag::INIT, t);
                let stats = if cfg.method == Method::MultibandGan {
                    let x = to_signed(&images);
                    let mut gan = match local_gan.take() {
                        Some(g) => g,
                        None => new_local_gan(cfg, image, &mut init)?,
                    };
                    train_local_gan(&mut gan, &x, t, &cfg.local_gan_train(), &mut stage_rng(seed, tag::LOCAL, t), &mut logf)?;
                    let (b, stats) = consolidate_task(
                        bundle.take(),
                        LocalModel::Gan { generator: &gan.generator },
                        &x,
                        t,
                        &cfg.gan_consolidation(),
                        &mut stage_rng(seed, tag::GLOBAL, t),
                        &mut logf,
                    )?;
                    *bundle = Some(b);
                    *local_gan = Some(gan);
                    stats
                } else {
                    let warm = bundle.as_ref().map(|b| &b.global);
                    let mut local = new_local_vae(cfg, image, warm, &mut init)?;
                    let prior =
                        train_local_vae(&mut local, &images, t, &cfg.local_vae_train(), &mut stage_rng(seed, tag::LOCAL, t), &mut logf)?;
                    let (b, stats) = consolidate_task(
                        bundle.take(),
                        LocalModel::Vae { encoder: &local.encoder, pipeline: &local.pipeline, prior },
                        &images,
                        t,
                        &cfg.vae_consolidation(),
                        &mut stage_rng(seed, tag::GLOBAL, t),
                        &mut logf,
                    )?;
                    *bundle = Some(b);
                    *last_encoder = Some(local.encoder);
                    stats
                };
                log.note(&format!(
                    "task {} consolidated: rehearsal max {} per batch (cap {}), {} of {} targets substituted",
                    t + 1,
                    stats.max_rehearsal_per_batch,
                    stats.rehearsal_cap,
                    stats.substituted,
                    stats.rehearsed
                ));
                record.consolidation = Some(stats);
            }
        }
        Ok(())
    }

    fn classifier_stage(&mut self, t: usize, record: &mut TaskRecord) -> Result<()> {
        let image = self.image_shape();
        let classes = self.data.stream.num_classes;
        let ccfg = self.cfg.classifier();
        let raw = self.data.task_images(t);
        let labels = self.data.task_labels(t);
        let test_idx = self.data.test_seen_classes(t);
        let test_labels: Vec<usize> = test_idx.iter().map(|&i| self.data.test.labels[i]).collect();
        let test_raw = self.data.test.images.select_rows(&test_idx);
        let Session { cfg, seed, model, log, clf, finetune, report, .. } = self;
        let ModelState::Multiband { bundle: Some(bundle), .. } = model else {
            return Err(Error::Contract("classifier stage needs a consolidated bundle".into()));
        };
        let mut logf = |e: &EpochLog| log.epoch(e);
        let mut r = stage_rng(*seed, tag::CLASSIFIER, t);
        let prev = clf.clone();
        let mut st = match clf.take() {
            Some(s) => s,
            None => ClassifierState {
                fe: FeatureExtractor::new(image, bundle.latent_dim(), &mut r),
                head: ClassifierHead::new(bundle.latent_dim(), classes, &mut r),
            },
        };
        train_feature_extractor(bundle, &mut st.fe, &ccfg, &mut r, &mut logf)?;
        let x = model_input::<f32>(bundle.kind, &raw);
        let prev_ref = prev.as_ref().map(|p| PreviousClassifier { fe: &p.fe, head: &p.head });
        let set = train_classifier_head(bundle, &st.fe, &mut st.head, &x, &labels, t, prev_ref, &ccfg, &mut r, &mut logf)?;
        record.head_label_counts = Some(set.label_counts(classes));
        let x_test = model_input::<f32>(bundle.kind, &test_raw);
        let acc = accuracy(&predict(&st.fe, &st.head, &x_test).classes, &test_labels);
        set_at(&mut report.accuracy, t, Some(acc));
        let mut line = format!("task {} classifier accuracy {acc:.4}", t + 1);
        if cfg.clf.finetune {
            let mut fr = rng::stream(*seed, &[tag::CLASSIFIER, t as u64, 1]);
            if finetune.is_none() {
                let mut init = rng::stream(*seed, &[tag::CLASSIFIER, u64::MAX]);
                *finetune = Some(FinetuneClassifier::new(image, bundle.latent_dim(), classes, &mut init));
            }
            let ft = finetune.as_mut().expect("just set");
            ft.train_task(&x, &labels, t, &ccfg, &mut fr, &mut logf)?;
            let fa = accuracy(&ft.predict(&x_test).classes, &test_labels);
            set_at(&mut report.finetune_accuracy, t, Some(fa));
            line.push_str(&format!(", fine-tune baseline {fa:.4}"));
        }
        log.note(&line);
        *clf = Some(st);
        Ok(())
    }

    /// Generated samples for task `s` as `[0, 1]` images. The replay
    /// baseline is not task-conditioned and ignores `s`.
    pub fn generate(&self, n: usize, s: usize, rng: &mut Rng64) -> Result<Tensor<f32>> {
        generate_from(&self.model, n, s, rng)
    }

    /// Append the evaluation rows for `trained_after = t`.
    pub fn evaluate(&mut self, t: usize) -> Result<()> {
        let rows = evaluation_rows(&self.model, &self.cfg, &self.data, &self.fnet, self.seed, t, self.cfg.eval.samples)?;
        for r in &rows {
            self.log.note(&format!(
                "eval after task {} on task {}: fid {:.4} precision {:.4} recall {:.4}",
                r.trained_after + 1,
                r.evaluated + 1,
                r.fid,
                r.precision,
                r.recall
            ));
        }
        self.report.rows.retain(|r| r.trained_after != t);
        self.report.rows.extend(rows);
        Ok(())
    }

    /// Grid after task `t`: one row per seen task, columns share noise.
    /// The noise file is created once per run directory and reused.
    pub fn emit_grid(&self, t: usize) -> Result<PathBuf> {
        let cols = self.cfg.eval.grid_columns;
        let path = self.paths.grid(t);
        if cols == 0 {
            return Ok(path);
        }
        let noise = match GridNoise::read(&self.paths.noise())? {
            Some(n) => n,
            None => {
                let n = GridNoise::new(&self.model, &self.cfg, self.seed, self.num_tasks(), cols);
                n.write(&self.paths.noise())?;
                n
            }
        };
        write_grid(&path, &grid_rows(&self.model, &noise, t + 1)?)?;
        Ok(path)
    }

    fn bundle_meta(&self) -> Result<BundleMeta> {
        Ok(BundleMeta {
            kind: bundle_kind(self.cfg.method),
            tasks_seen: 0,
            priors: Vec::new(),
            config_hash: self.hash.clone(),
            seed: self.seed,
            config: serde_json::to_value(&self.cfg)?,
            tensors: Vec::new(),
        })
    }

    fn save_checkpoint(&self, t: usize) -> Result<()> {
        let path = self.paths.bundle(t);
        let mut meta = self.bundle_meta()?;
        let mut local = Vec::new();
        match &self.model {
            ModelState::Gr { model } => {
                let named = checkpoint::module_tensors(&model.vae, "gr");
                meta.tasks_seen = t + 1;
                meta.tensors = named.iter().map(|(n, _)| n.clone()).collect();
                meta.tensors.sort();
                checkpoint::write_tensors(&path, &named, &BTreeMap::new())?;
                fs::write(checkpoint::sidecar_path(&path), serde_json::to_string_pretty(&meta)?)?;
            }
            ModelState::Multiband { bundle, local_gan } => {
                let b = bundle.as_ref().ok_or_else(|| Error::Contract("no bundle to checkpoint".into()))?;
                let mut extra = Vec::new();
                if let Some(c) = &self.clf {
                    extra.extend(c.fe.net.named_tensors("clf.fe"));
                    extra.extend(c.head.net.named_tensors("clf.head"));
                }
                checkpoint::save_bundle(&path, b, &extra, meta)?;
                if let Some(g) = local_gan {
                    local.extend(checkpoint::module_tensors(&g.generator, "local.generator"));
                    local.extend(g.critic.named_tensors("local.critic"));
                }
            }
        }
        if let Some(f) = &self.finetune {
            local.extend(f.net.named_tensors("finetune"));
        }
        if !local.is_empty() {
            checkpoint::write_tensors(&self.paths.local_state(t), &local, &BTreeMap::new())?;
        }
        Ok(())
    }

    /// Restore the state saved after task `t` and continue from `t + 1`.
    fn load_checkpoint(&mut self, t: usize) -> Result<()> {
        let path = self.paths.bundle(t);
        let meta = checkpoint::read_meta(&path)?;
        if meta.config_hash != self.hash || meta.seed != self.seed {
            return Err(Error::Checkpoint(format!("{} belongs to a different config or seed", path.display())));
        }
        let image = self.image_shape();
        let local = match self.paths.local_state(t) {
            p if p.exists() => Some(checkpoint::read_tensors::<f32>(&p)?.0),
            _ => None,
        };
        match &mut self.model {
            ModelState::Gr { model } => {
                let (map, _) = checkpoint::read_tensors::<f32>(&path)?;
                checkpoint::load_module(&mut model.vae, "gr", &map)?;
            }
            ModelState::Multiband { bundle, local_gan } => {
                let mut b = bundle_template(&self.cfg, image)?;
                let (_, map) = checkpoint::load_bundle_into(&path, &mut b)?;
                if self.cfg.clf.enabled {
                    let mut r = stage_rng(0, tag::INIT, 0);
                    let mut st = ClassifierState {
                        fe: FeatureExtractor::new(image, b.latent_dim(), &mut r),
                        head: ClassifierHead::new(b.latent_dim(), self.data.stream.num_classes, &mut r),
                    };
                    st.fe.net.load_named("clf.fe", &map)?;
                    st.head.net.load_named("clf.head", &map)?;
                    self.clf = Some(st);
                }
                if self.cfg.method == Method::MultibandGan {
                    let map = local.as_ref().ok_or_else(|| Error::load(self.paths.local_state(t), "missing"))?;
                    let mut g = new_local_gan(&self.cfg, image, &mut stage_rng(0, tag::INIT, 0))?;
                    checkpoint::load_module(&mut g.generator, "local.generator", map)?;
                    g.critic.load_named("local.critic", map)?;
                    *local_gan = Some(g);
                }
                *bundle = Some(b);
            }
        }
        if self.cfg.clf.enabled && self.cfg.clf.finetune {
            let map = local.as_ref().ok_or_else(|| Error::load(self.paths.local_state(t), "missing"))?;
            let latent = self.bundle().map(|b| b.latent_dim()).unwrap_or(0);
            let mut f = FinetuneClassifier::new(image, latent, self.data.stream.num_classes, &mut stage_rng(0, tag::INIT, 0));
            f.net.load_named("finetune", map)?;
            self.finetune = Some(f);
        }
        let text = fs::read_to_string(self.paths.metrics_json()).map_err(|e| Error::load(self.paths.metrics_json(), e))?;
        let mut report = MetricsReport::from_json(&text)?;
        report.rows.retain(|r| r.trained_after <= t);
        report.accuracy.truncate(t + 1);
        report.finetune_accuracy.truncate(t + 1);
        self.report = report;
        self.next_task = t + 1;
        Ok(())
    }

    pub fn write_metrics(&self) -> Result<()> {
        fs::write(self.paths.metrics_csv(), self.report.to_csv())?;
        fs::write(self.paths.metrics_json(), self.report.to_json())?;
        Ok(())
    }

    pub fn artifacts(&self) -> RunArtifacts {
        let done = 0..self.next_task;
        RunArtifacts {
            dir: self.paths.dir.clone(),
            checkpoints: done.clone().map(|t| self.paths.bundle(t)).collect(),
            metrics_csv: self.paths.metrics_csv(),
            metrics_json: self.paths.metrics_json(),
            grids: done.map(|t| self.paths.grid(t)).collect(),
            log: self.paths.log(),
            seed: self.seed,
            config_hash: self.hash.clone(),
        }
    }
}

fn set_at(v: &mut Vec<Option<f64>>, i: usize, x: Option<f64>) {
    if v.len() <= i {
        v.resize(i + 1, None);
    }
    v[i] = x;
}

/// Generated `[0, 1]` images for task `s` from either model family.
pub fn generate_from(model: &ModelState, n: usize, s: usize, rng: &mut Rng64) -> Result<Tensor<f32>> {
    match model {
        ModelState::Gr { model } => Ok(model.sample(n, rng)),
        ModelState::Multiband { bundle, .. } => {
            let b = bundle.as_ref().ok_or_else(|| Error::Contract("no task trained yet".into()))?;
            let (x, _) = sample_global(b, n, rng, Some(s))?;
            Ok(if b.kind == BundleKind::Gan { to_unit(&x) } else { x })
        }
    }
}

/// Shared noise for sample grids: `cont` holds one block of `cols` rows per
/// task (the replay model uses a block per row, the aligned models reuse the
/// first), `uniform` thresholds the binary priors.
#[derive(Clone, Debug, PartialEq)]
pub struct GridNoise {
    pub cont: Tensor<f32>,
    pub uniform: Tensor<f32>,
}

impl GridNoise {
    pub fn new(model: &ModelState, cfg: &ExperimentConfig, seed: u64, tasks: usize, cols: usize) -> Self {
        let spec = cfg.translator_spec();
        let cont_dim = match model {
            ModelState::Gr { model } => model.cont_dim(),
            _ => spec.cont_dim,
        };
        let mut r = rng::stream(seed, &[tag::SAMPLES]);
        let cont = rng::normal(&mut r, &[tasks * cols, cont_dim]);
        let uniform = rng::uniform(&mut r, &[cols, spec.bin_dim.max(1)]);
        Self { cont, uniform }
    }

    pub fn columns(&self) -> usize {
        self.uniform.shape()[0]
    }

    pub fn read(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let (mut m, _) = checkpoint::read_tensors::<f32>(path)?;
        Ok(match (m.remove("cont"), m.remove("uniform")) {
            (Some(cont), Some(uniform)) => Some(Self { cont, uniform }),
            _ => None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        checkpoint::write_tensors(path, &[("cont".into(), self.cont.clone()), ("uniform".into(), self.uniform.clone())], &BTreeMap::new())
    }
}

/// One image row per task `0..tasks`, all rows drawn from the same noise.
pub fn grid_rows(model: &ModelState, noise: &GridNoise, tasks: usize) -> Result<Vec<Tensor<f32>>> {
    let cols = noise.columns();
    if noise.cont.shape()[0] < tasks * cols {
        return Err(Error::Contract(format!("grid noise covers {} rows, {tasks} tasks need {}", noise.cont.shape()[0], tasks * cols)));
    }
    let first: Vec<usize> = (0..cols).collect();
    let mut rows = Vec::with_capacity(tasks);
    for s in 0..tasks {
        let img = match model {
            ModelState::Gr { model } => {
                // no task conditioning: each row takes its own block of the noise
                let idx: Vec<usize> = (s * cols..(s + 1) * cols).collect();
                model.decode(&noise.cont.select_rows(&idx))
            }
            ModelState::Multiband { bundle, .. } => {
                let b = bundle.as_ref().ok_or_else(|| Error::Contract("no task trained yet".into()))?;
                let c = noise.cont.select_rows(&first);
                let d = b.bin_dim();
                let bin = (d > 0).then(|| {
                    let p = &b.priors[s].probs;
                    let v: Vec<f32> = (0..cols)
                        .flat_map(|j| (0..d).map(move |i| (j, i)))
                        .map(|(j, i)| if (noise.uniform.row(j)[i] as f64) < p[i] { 1.0 } else { 0.0 })
                        .collect();
                    Tensor::from_vec(&[cols, d], v)
                });
                let x = b.generate(&c, bin.as_ref(), &vec![s; cols]);
                if b.kind == BundleKind::Gan {
                    to_unit(&x)
                } else {
                    x
                }
            }
        };
        rows.push(img);
    }
    Ok(rows)
}

/// A model restored from a task checkpoint, without its run directory.
pub struct LoadedCheckpoint {
    pub cfg: ExperimentConfig,
    pub meta: BundleMeta,
    pub model: ModelState,
}

impl LoadedCheckpoint {
    pub fn tasks_seen(&self) -> usize {
        self.meta.tasks_seen
    }

    pub fn image_shape(&self) -> [usize; 3] {
        checkpoint_image_shape(&self.cfg)
    }
}

fn checkpoint_image_shape(cfg: &ExperimentConfig) -> [usize; 3] {
    match cfg.scenario.policy {
        Policy::SequentialDatasets => image_shape(cfg.scenario.sequence[0]),
        _ => image_shape(cfg.dataset),
    }
}

/// Rebuild the generative model saved at `path` using the config stored in
/// its sidecar.
pub fn load_checkpoint_model(path: &Path) -> Result<LoadedCheckpoint> {
    let meta = checkpoint::read_meta(path)?;
    let cfg: ExperimentConfig = serde_json::from_value(meta.config.clone())?;
    let cfg = cfg.resolved()?;
    let image = checkpoint_image_shape(&cfg);
    let model = if cfg.method == Method::Gr {
        let mut m = new_gr(&cfg, image, &mut stage_rng(0, tag::INIT, 0))?;
        let (map, _) = checkpoint::read_tensors::<f32>(path)?;
        checkpoint::load_module(&mut m.vae, "gr", &map)?;
        ModelState::Gr { model: m }
    } else {
        let mut b = bundle_template(&cfg, image)?;
        checkpoint::load_bundle_into(path, &mut b)?;
        ModelState::Multiband { bundle: Some(b), local_gan: None }
    };
    Ok(LoadedCheckpoint { cfg, meta, model })
}

/// Score a checkpoint on every task it has seen, against the test split of
/// the data it was trained on. Rows use `trained_after = tasks_seen - 1`.
pub fn evaluate_checkpoint(path: &Path, samples: Option<usize>, echo: bool) -> Result<Vec<MetricsRow>> {
    let ck = load_checkpoint_model(path)?;
    let data = prepare_data(&ck.cfg, ck.meta.seed)?;
    let fnet = feature_net_for(&ck.cfg, &data, echo)?;
    let t = ck.tasks_seen().checked_sub(1).ok_or_else(|| Error::Checkpoint("checkpoint has seen no task".into()))?;
    evaluation_rows(&ck.model, &ck.cfg, &data, &fnet, ck.meta.seed, t, samples.unwrap_or(ck.cfg.eval.samples))
}

/// Metrics rows for `trained_after = t`, one per seen task. The replay
/// baseline is not task-conditioned, so its single generation set is scored
/// against the union of the seen tasks' test data and repeated on every row.
pub fn evaluation_rows(
    model: &ModelState,
    cfg: &ExperimentConfig,
    data: &Prepared,
    fnet: &FeatureNet,
    seed: u64,
    t: usize,
    n: usize,
) -> Result<Vec<MetricsRow>> {
    let prd = cfg.prd();
    let mut rows = Vec::new();
    if let ModelState::Gr { .. } = model {
        let real = data.test.images.select_rows(&data.test_union(t));
        let gen = generate_from(model, n, 0, &mut stage_rng(seed, tag::EVAL, t))?;
        let (fid, precision, recall, wasserstein) = score_task(fnet, &real, &gen, &prd)?;
        for s in 0..=t {
            rows.push(MetricsRow { trained_after: t, evaluated: s, fid, precision, recall, wasserstein: wasserstein.clone() });
        }
        return Ok(rows);
    }
    for s in 0..=t {
        let real = data.test.images.select_rows(&test_indices_for(&data.stream, &data.test, s));
        let mut r = rng::stream(seed, &[tag::EVAL, t as u64, s as u64]);
        let gen = generate_from(model, n, s, &mut r)?;
        let (fid, precision, recall, wasserstein) = score_task(fnet, &real, &gen, &prd)?;
        rows.push(MetricsRow { trained_after: t, evaluated: s, fid, precision, recall, wasserstein });
    }
    Ok(rows)
}

/// Write a sample grid for a checkpoint: one row per seen task, `cols`
/// columns sharing continuous noise drawn from `seed`.
pub fn sample_checkpoint(path: &Path, cols: usize, seed: u64, out: &Path) -> Result<()> {
    let ck = load_checkpoint_model(path)?;
    let tasks = ck.tasks_seen();
    let noise = GridNoise::new(&ck.model, &ck.cfg, seed, tasks, cols);
    write_grid(out, &grid_rows(&ck.model, &noise, tasks)?)
}

/// Highest task whose bundle, sidecar and metrics are all on disk.
pub fn last_checkpoint(paths: &RunPaths) -> Option<usize> {
    if !paths.metrics_json().exists() {
        return None;
    }
    let mut best = None;
    for e in fs::read_dir(paths.checkpoints()).ok()?.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(num) = name.strip_prefix("task_").and_then(|s| s.strip_suffix(".bundle")) else { continue };
        let Ok(n) = num.parse::<usize>() else { continue };
        if n >= 1 && checkpoint::sidecar_path(&e.path()).exists() {
            best = best.max(Some(n - 1));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    /// 1-based task that failed, when known.
    pub task: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_error_record(path: &Path, e: &Error, task: Option<usize>, seed: u64, hash: &str) -> Result<()> {
    let rec = ErrorRecord { kind: e.kind().into(), message: e.to_string(), task: task.map(|t| t + 1), seed, config_hash: hash.into() };
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(&rec)?)?;
    Ok(())
}

/// Tile `[0, 1]` image rows into one PNG with a 2-pixel black border.
pub fn write_grid(path: &Path, rows: &[Tensor<f32>]) -> Result<()> {
    let Some(first) = rows.first() else { return Ok(()) };
    let s = first.shape();
    let (cols, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = 2;
    let width = cols * (w + pad) + pad;
    let height = rows.len() * (h + pad) + pad;
    let mut buf = vec![0u8; width * height * ch];
    for (r, t) in rows.iter().enumerate() {
        let d = t.data();
        for c in 0..cols {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..ch {
                        let v = d[((c * ch + k) * h + y) * w + x].clamp(0.0, 1.0);
                        let px = pad + c * (w + pad) + x;
                        let py = pad + r * (h + pad) + y;
                        buf[(py * width + px) * ch + k] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let color = if ch == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    image::save_buffer_with_format(path, &buf, width as u32, height as u32, color, image::ImageFormat::Png)?;
    Ok(())
}

// ----- experiments ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub grids: Vec<PathBuf>,
    pub log: PathBuf,
    pub seed: u64,
    pub config_hash: String,
}

/// One full run per configured seed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: SessionOptions) -> Result<Vec<RunArtifacts>> {
    let resolved = cfg.resolved()?;
    let mut out = Vec::new();
    for &seed in &resolved.seeds {
        out.push(run_seed(&resolved, seed, opts)?.artifacts());
    }
    Ok(out)
}

/// Run a single seed and return the finished session.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: SessionOptions) -> Result<Session> {
    let mut s = open_seed(cfg, seed, opts)?;
    s.run_to_end()?;
    Ok(s)
}

/// Open (or resume) the session of one seed. A setup failure still leaves
/// an error record in the run directory.
pub fn open_seed(cfg: &ExperimentConfig, seed: u64, opts: SessionOptions) -> Result<Session> {
    Session::new(cfg, seed, opts).inspect_err(|e| {
        if let Ok(r) = cfg.resolved() {
            if let Ok(h) = r.hash() {
                let paths = RunPaths::new(&r.out_dir, &h[..12], seed);
                let _ = write_error_record(&paths.error(), e, None, seed, &h);
            }
        }
    })
}

/// Rung names of the ablation ladder, in order.
pub const LADDER: [&str; 6] =
    ["generative replay", "+ two-step training", "+ translator", "+ binary latent", "+ controlled forgetting", "+ convolutional"];

/// Cumulative ladder configs derived from `base` (its method and ablation
/// flags are overridden).
pub fn ladder(base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    use crate::config::AblationConfig;
    let flags = [
        (false, false, false, false, false),
        (true, false, false, false, false),
        (true, true, false, false, false),
        (true, true, true, false, false),
        (true, true, true, true, false),
        (true, true, true, true, true),
    ];
    LADDER
        .iter()
        .zip(flags)
        .map(|(&name, (two_step, translator, binary_latent, controlled_forgetting, conv))| {
            let mut c = base.clone();
            c.method = if two_step { Method::MultibandVae } else { Method::Gr };
            c.ablation = AblationConfig { two_step, translator, binary_latent, controlled_forgetting, conv };
            c.vae.arch = None;
            c.clf.enabled = false;
            (name, c)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Final mean FID per completed seed.
    pub fid: Vec<f64>,
    pub complete: bool,
}

impl AblationRow {
    pub fn mean_fid(&self) -> Option<f64> {
        (!self.fid.is_empty()).then(|| self.fid.iter().sum::<f64>() / self.fid.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// False when the time budget ran out before the ladder finished.
    pub finished: bool,
    pub elapsed_secs: f64,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Modification | final FID (mean) | per seed |\n|---|---|---|\n");
        for r in &self.rows {
            let mean = r.mean_fid().map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
            let per: Vec<String> = r.fid.iter().map(|v| format!("{v:.2}")).collect();
            let note = if r.complete { "" } else { " (incomplete)" };
            s.push_str(&format!("| {}{note} | {mean} | {} |\n", r.name, per.join(", ")));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("modification,config_hash,mean_fid,seeds,fids,complete\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(|v| v.to_string()).collect();
            let fids: Vec<String> = r.fid.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.name,
                r.config_hash,
                r.mean_fid().map(|v| v.to_string()).unwrap_or_default(),
                seeds.join(";"),
                fids.join(";"),
                r.complete
            ));
        }
        s
    }
}

/// Run the ladder rung by rung, all seeds per rung. With a budget, no new
/// task starts once it is spent; completed rungs are still reported.
pub fn run_ablation(base: &ExperimentConfig, opts: SessionOptions, budget: Option<Duration>) -> Result<AblationTable> {
    let base = base.resolved()?;
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut finished = true;
    'rungs: for (name, cfg) in ladder(&base) {
        let hash = cfg.short_hash()?;
        let mut row = AblationRow { name: name.into(), config_hash: hash, seeds: Vec::new(), fid: Vec::new(), complete: false };
        for &seed in &base.seeds {
            let mut s = open_seed(&cfg, seed, opts)?;
            while !s.is_done() {
                if budget.is_some_and(|b| started.elapsed() >= b) {
                    finished = false;
                    rows.push(row);
                    break 'rungs;
                }
                s.step_task()?;
            }
            row.seeds.push(seed);
            row.fid.push(s.report.final_fid());
            if opts.echo {
                eprintln!("{name} seed {seed}: final FID {:.3} ({:.0}s elapsed)", s.report.final_fid(), started.elapsed().as_secs_f64());
            }
        }
        row.complete = true;
        rows.push(row);
    }
    let table = AblationTable { rows, finished, elapsed_secs: started.elapsed().as_secs_f64() };
    let tag = base.short_hash()?;
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join(format!("ablation_{tag}.md")), table.to_markdown())?;
    fs::write(base.out_dir.join(format!("ablation_{tag}.csv")), table.to_csv())?;
    Ok(table)
}

// ----- toy experiment -------------------------------------------------------

/// Probe measurements of the three-task toy stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    /// Mean cosine similarity between class-1 embeddings of tasks 1 and 3.
    pub cos_same_class: f64,
    /// Mean cosine similarity between class-1 and class-0 embeddings.
    pub cos_other_class: f64,
    /// Mean movement of the class-0 embeddings between the task-2 and task-3
    /// snapshots, in units of the RMS spread of all probes embedded at task 2.
    pub drift_aligned: f64,
    pub drift_gr: f64,
    /// The same movement in units of the class-0 spread alone.
    pub drift_aligned_within_class: f64,
    pub drift_gr_within_class: f64,
    pub aligned_metrics: PathBuf,
    pub gr_metrics: PathBuf,
    pub fid_matrix_aligned: Vec<Vec<Option<f64>>>,
    pub fid_matrix_gr: Vec<Vec<Option<f64>>>,
}

impl ToyReport {
    pub fn similarity_margin(&self) -> f64 {
        self.cos_same_class - self.cos_other_class
    }
}

/// Mean pairwise cosine similarity between the rows of `a` and of `b`.
pub fn mean_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let norm = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        let (n, _) = t.dims2();
        (0..n)
            .map(|i| {
                let r: Vec<f64> = t.row(i).iter().map(|&v| v as f64).collect();
                let l = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                r.into_iter().map(|v| v / l).collect()
            })
            .collect()
    };
    let (na, nb) = (norm(a), norm(b));
    let mut sum = 0.0;
    for x in &na {
        for y in &nb {
            sum += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    sum / (na.len() * nb.len()).max(1) as f64
}

/// Mean distance between matched rows of two snapshots, divided by the RMS
/// spread of `reference` around its mean. With `reference` taken from the
/// same space as the snapshots, the ratio is invariant to rescaling it.
pub fn normalized_drift(before: &Tensor<f32>, after: &Tensor<f32>, reference: &Tensor<f32>) -> f64 {
    let (n, d) = before.dims2();
    let (b, a) = (before.data(), after.data());
    let dist: f64 = (0..n)
        .map(|i| (0..d).map(|j| (b[i * d + j] as f64 - a[i * d + j] as f64).powi(2)).sum::<f64>().sqrt())
        .sum();
    (dist / n.max(1) as f64) / rms_spread(reference).max(1e-12)
}

/// Root mean squared distance of the rows from their mean.
pub fn rms_spread(x: &Tensor<f32>) -> f64 {
    let (n, d) = x.dims2();
    let v = x.data();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += v[i * d + j] as f64 / n as f64;
        }
    }
    let ss: f64 = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| (v[i * d + j] as f64 - mean[j]).powi(2)).sum();
    (ss / n.max(1) as f64).sqrt()
}

/// Up to `max` train rows of task `t` with label `class`, in task order.
fn probe_rows(data: &Prepared, t: usize, class: usize, max: usize) -> Vec<usize> {
    data.stream.tasks[t].samples.iter().copied().filter(|&i| data.train.labels[i] == class).take(max).collect()
}

fn eval_codes(encoder: &Net<f32>, cfg: &ExperimentConfig, x: &Tensor<f32>) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let v = encode(encoder, x, cfg.translator_spec().cont_dim)?;
    let bin = (v.mu_p.shape()[1] > 0).then(|| v.mu_p.map(|p| p.round()));
    Ok((v.mu, bin))
}

/// Train the aligned VAE and the replay baseline on the toy stream and
/// measure the probe properties. `cfg` supplies epochs and evaluation
/// settings; method and scenario are overridden.
pub fn run_toy(cfg: &ExperimentConfig, seed: u64, opts: SessionOptions, probe: usize) -> Result<ToyReport> {
    let mut aligned = cfg.clone();
    aligned.method = Method::MultibandVae;
    aligned.scenario.policy = Policy::Toy;
    aligned.clf.enabled = false;
    let mut gr = aligned.clone();
    gr.method = Method::Gr;
    gr.ablation.two_step = false;

    // aligned method: keep each probe set's local codes, translate at the end
    let mut s = Session::new(&aligned, seed, SessionOptions { resume: false, ..opts })?;
    let rows1a = probe_rows(&s.data, 0, 1, probe);
    let rows0 = probe_rows(&s.data, 1, 0, probe);
    let rows1b = probe_rows(&s.data, 2, 1, probe);
    if rows1a.is_empty() || rows0.is_empty() || rows1b.is_empty() {
        return Err(Error::Config("toy stream lacks one of its probe classes".into()));
    }
    let img = |rows: &[usize], d: &Prepared| d.train.images.select_rows(rows);
    s.step_task()?;
    let codes1a = eval_codes(s.last_encoder.as_ref().expect("local encoder"), &s.cfg, &img(&rows1a, &s.data))?;
    s.step_task()?;
    let codes0 = eval_codes(s.last_encoder.as_ref().expect("local encoder"), &s.cfg, &img(&rows0, &s.data))?;
    let (z0_before, z1a_before) = {
        let b = s.bundle().expect("bundle");
        (
            b.translate(&codes0.0, codes0.1.as_ref(), &vec![1; rows0.len()]),
            b.translate(&codes1a.0, codes1a.1.as_ref(), &vec![0; rows1a.len()]),
        )
    };
    s.step_task()?;
    let codes1b = eval_codes(s.last_encoder.as_ref().expect("local encoder"), &s.cfg, &img(&rows1b, &s.data))?;
    let b = s.bundle().expect("bundle");
    let z1a = b.translate(&codes1a.0, codes1a.1.as_ref(), &vec![0; rows1a.len()]);
    let z1b = b.translate(&codes1b.0, codes1b.1.as_ref(), &vec![2; rows1b.len()]);
    let z0 = b.translate(&codes0.0, codes0.1.as_ref(), &vec![1; rows0.len()]);
    let cos_same_class = mean_cosine(&z1a, &z1b);
    let ones = Tensor::cat_rows(&[&z1a, &z1b]);
    let cos_other_class = mean_cosine(&ones, &z0);
    let seen_before = Tensor::cat_rows(&[&z1a_before, &z0_before]);
    let drift_aligned = normalized_drift(&z0_before, &z0, &seen_before);
    let drift_aligned_within_class = normalized_drift(&z0_before, &z0, &z0_before);
    let aligned_metrics = s.paths.metrics_json();
    let fid_matrix_aligned = s.report.fid_matrix();
    let x0 = img(&rows0, &s.data);
    let x1a = img(&rows1a, &s.data);
    drop(s);

    // replay baseline: its single latent space is the encoder mean
    let mut g = Session::new(&gr, seed, SessionOptions { resume: false, ..opts })?;
    g.step_task()?;
    g.step_task()?;
    let before = g.gr_model().expect("gr").embed(&x0)?;
    let ones_before = g.gr_model().expect("gr").embed(&x1a)?;
    g.step_task()?;
    let after = g.gr_model().expect("gr").embed(&x0)?;
    let drift_gr = normalized_drift(&before, &after, &Tensor::cat_rows(&[&ones_before, &before]));
    let drift_gr_within_class = normalized_drift(&before, &after, &before);
    Ok(ToyReport {
        cos_same_class,
        cos_other_class,
        drift_aligned,
        drift_gr,
        drift_aligned_within_class,
        drift_gr_within_class,
        aligned_metrics,
        gr_metrics: g.paths.metrics_json(),
        fid_matrix_aligned,
        fid_matrix_gr: g.report.fid_matrix(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_is_scale_free_and_zero_for_identical_snapshots() {
        let a = Tensor::from_vec(&[3, 2], vec![0.0f32, 1.0, 2.0, 0.5, -1.0, 3.0]);
        assert_eq!(normalized_drift(&a, &a, &a), 0.0);
        let b = a.map(|v| v + 0.25);
        let d1 = normalized_drift(&a, &b, &a);
        let s = |t: &Tensor<f32>| t.map(|v| 10.0 * v);
        let d2 = normalized_drift(&s(&a), &s(&b), &s(&a));
        assert!((d1 - d2).abs() < 1e-6);
        // a uniform shift moves every row by the same distance
        let spread = rms_spread(&a);
        assert!((d1 - 0.25 * 2f64.sqrt() / spread).abs() < 1e-6);
    }

    #[test]
    fn cosine_of_parallel_and_orthogonal_sets() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 2.0, 0.0]);
        let b = Tensor::from_vec(&[1, 2], vec![0.0f32, 3.0]);
        assert!((mean_cosine(&a, &a) - 1.0).abs() < 1e-12);
        assert!(mean_cosine(&a, &b).abs() < 1e-12);
    }

    #[test]
    fn ladder_has_six_cumulative_rungs() {
        let l = ladder(&ExperimentConfig::default());
        assert_eq!(l.len(), 6);
        assert_eq!(l[0].1.method, Method::Gr);
        assert!(l[1..].iter().all(|(_, c)| c.method == Method::MultibandVae));
        assert!(!l[1].1.ablation.translator && l[2].1.ablation.translator);
        assert!(l[5].1.ablation.conv && l[5].1.ablation.controlled_forgetting);
        let hashes: Vec<String> = l.iter().map(|(_, c)| c.hash().unwrap()).collect();
        let mut dedup = hashes.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 6);
    }
}
