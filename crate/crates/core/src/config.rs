//! Experiment configuration: TOML in, fully resolved and validated struct out.
//!
//! Keys that depend on the dataset or scenario are optional in the file and
//! filled in by [`ExperimentConfig::resolved`]. The hash covers the resolved
//! form, so spelling a default out explicitly does not change it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::ConsolidationConfig;
use crate::classifier::{ClassifierConfig, CurrentSource};
use crate::data::{DatasetId, Policy};
use crate::error::{Error, Result};
use crate::gan::GanTrainConfig;
use crate::metrics::{FeatureNetConfig, PrdConfig};
use crate::models::{GanArch, TranslatorSpec, VaeArch};
use crate::vae::VaeTrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MultibandVae,
    MultibandGan,
    Gr,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiband_vae" => Ok(Method::MultibandVae),
            "multiband_gan" => Ok(Method::MultibandGan),
            "gr" => Ok(Method::Gr),
            _ => Err(Error::Config(format!("unknown method `{s}` (expected multiband_vae, multiband_gan or gr)"))),
        }
    }
}

pub fn parse_policy(s: &str) -> Result<Policy> {
    match s {
        "class_incremental" => Ok(Policy::ClassIncremental),
        "dirichlet" => Ok(Policy::Dirichlet),
        "sequential_datasets" => Ok(Policy::SequentialDatasets),
        "toy" => Ok(Policy::Toy),
        _ => Err(Error::Config(format!("unknown scenario `{s}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub policy: Policy,
    pub num_tasks: usize,
    /// Dirichlet concentration; only meaningful for `dirichlet`.
    pub alpha: Option<f64>,
    /// Keep only this many training images (seeded subsample) before splitting.
    pub max_train: Option<usize>,
    /// Cap on samples per task (the toy split uses 3000 by default).
    pub max_per_task: Option<usize>,
    /// Datasets for `sequential_datasets`, in order.
    pub sequence: Vec<DatasetId>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            policy: Policy::ClassIncremental,
            num_tasks: 5,
            alpha: None,
            max_train: None,
            max_per_task: None,
            sequence: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub arch: Option<VaeArch>,
    pub cont_dim: Option<usize>,
    pub bin_dim: Option<usize>,
    pub code_width: usize,
    pub translator_hidden: Option<usize>,
    pub latent_dim: Option<usize>,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub phase1_epochs: usize,
    pub temperature: f64,
    /// Rows of the current task kept for the controlled-forgetting search.
    pub similarity_rows: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            arch: None,
            cont_dim: None,
            bin_dim: None,
            code_width: 8,
            translator_hidden: None,
            latent_dim: None,
            batch: 64,
            lr: 1e-3,
            decay: 0.98,
            local_epochs: 70,
            global_epochs: 140,
            phase1_epochs: 5,
            temperature: 0.67,
            similarity_rows: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub arch: Option<GanArch>,
    pub noise_dim: Option<usize>,
    pub translator_hidden: Option<usize>,
    pub latent_dim: usize,
    pub batch: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub phase1_epochs: usize,
    pub critic_steps: usize,
    pub lambda_gp: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            arch: None,
            noise_dim: None,
            translator_hidden: None,
            latent_dim: 100,
            batch: 64,
            lr_local: 2e-4,
            lr_global: 1e-3,
            decay: 0.99,
            beta1: 0.0,
            beta2: 0.9,
            local_epochs: 120,
            global_epochs: 200,
            phase1_epochs: 5,
            critic_steps: 5,
            lambda_gp: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeArch {
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClfConfig {
    pub enabled: bool,
    pub fe_arch: FeArch,
    pub epochs_fe: usize,
    pub epochs_head: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub samples_per_task: usize,
    /// Also train the no-replay fine-tuned reference classifier.
    pub finetune: bool,
    /// `generated` or `real`: the head's current-task latents after task 1.
    pub current_task_source: CurrentSource,
}

impl Default for ClfConfig {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            enabled: false,
            fe_arch: FeArch::Mlp,
            epochs_fe: c.fe_epochs,
            epochs_head: c.head_epochs,
            batch: c.batch,
            lr: c.lr,
            decay: c.decay,
            samples_per_task: c.samples_per_task,
            finetune: true,
            current_task_source: c.current_source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per evaluated task.
    pub samples: usize,
    pub prd_clusters: usize,
    pub prd_angles: usize,
    pub prd_runs: usize,
    pub feature_net_epochs: usize,
    /// Evaluate after every task; when false only after the last one.
    pub every_task: bool,
    pub grid_columns: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = PrdConfig::default();
        Self {
            samples: 5000,
            prd_clusters: p.num_clusters,
            prd_angles: p.num_angles,
            prd_runs: p.num_runs,
            feature_net_epochs: FeatureNetConfig::default().epochs,
            every_task: true,
            grid_columns: 10,
        }
    }
}

/// Cumulative switches of the ablation ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Local training followed by consolidation. Off means plain generative replay.
    pub two_step: bool,
    /// Learned translator; off passes `[latent, task code]` straight to the decoder.
    pub translator: bool,
    pub binary_latent: bool,
    pub controlled_forgetting: bool,
    pub conv: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { two_step: true, translator: true, binary_latent: true, controlled_forgetting: true, conv: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub data_root: PathBuf,
    pub method: Method,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Controlled-forgetting threshold. Unset: 0.95 for Dirichlet splits,
    /// 1 for class-incremental ones, 0.9 otherwise.
    pub gamma: Option<f64>,
    pub scenario: ScenarioConfig,
    pub vae: VaeConfig,
    pub gan: GanConfig,
    pub clf: ClfConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Mnist,
            data_root: PathBuf::from("data"),
            method: Method::MultibandVae,
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            gamma: None,
            scenario: ScenarioConfig::default(),
            vae: VaeConfig::default(),
            gan: GanConfig::default(),
            clf: ClfConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// `[c, h, w]` of a dataset's images.
pub fn image_shape(id: DatasetId) -> [usize; 3] {
    match id {
        DatasetId::Cifar10 | DatasetId::Cifar100 | DatasetId::Celeba => [3, 32, 32],
        _ => [1, 28, 28],
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    check(v.is_finite() && v > 0.0, || format!("{name} must be positive, got {v}"))
}

fn check_decay(name: &str, v: f64) -> Result<()> {
    check(v.is_finite() && v > 0.0 && v <= 1.0, || format!("{name} must lie in (0, 1], got {v}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fill every dataset- and scenario-dependent default, then validate.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let d = c.dataset;
        if c.scenario.policy == Policy::Toy {
            c.scenario.num_tasks = 3;
            c.scenario.max_per_task.get_or_insert(3000);
        }
        if c.scenario.policy == Policy::Dirichlet {
            c.scenario.alpha.get_or_insert(1.0);
        }
        if !c.ablation.two_step && c.method != Method::Gr {
            // the ladder's first rung is the replay baseline
            c.method = Method::Gr;
        }
        c.gamma.get_or_insert(match c.scenario.policy {
            Policy::Dirichlet => 0.95,
            Policy::ClassIncremental => 1.0,
            _ => 0.9,
        });

        let arch = match (c.vae.arch, d) {
            (Some(a), _) => a,
            (None, DatasetId::Celeba) => VaeArch::ConvCeleba,
            (None, _) if c.ablation.conv => VaeArch::Conv,
            (None, _) => VaeArch::Dense,
        };
        c.vae.arch = Some(arch);
        let (cont, bin) = match d {
            DatasetId::FashionMnist | DatasetId::Omniglot => (12, 4),
            DatasetId::Celeba => (32, 8),
            _ => (8, 4),
        };
        c.vae.cont_dim.get_or_insert(cont);
        c.vae.bin_dim.get_or_insert(bin);
        if !c.ablation.binary_latent {
            c.vae.bin_dim = Some(0);
        }
        let (hidden, latent) = match arch {
            VaeArch::Dense => (192, 384),
            VaeArch::Conv => (192, 512),
            VaeArch::ConvCeleba => (800, 1600),
        };
        c.vae.translator_hidden.get_or_insert(hidden);
        c.vae.latent_dim.get_or_insert(latent);

        c.gan.arch.get_or_insert(match d {
            DatasetId::Cifar10 | DatasetId::Cifar100 | DatasetId::Celeba => GanArch::ConvCifar,
            _ => GanArch::Conv,
        });
        // same translator as the VAE: its continuous input width and hidden size
        c.gan.noise_dim.get_or_insert(c.vae.cont_dim.unwrap_or(cont));
        c.gan.translator_hidden.get_or_insert(c.vae.translator_hidden.unwrap_or(hidden));

        c.validate()?;
        Ok(c)
    }

    /// Checks that need no defaults filled in; [`resolved`](Self::resolved) calls it.
    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        check(!self.seeds.is_empty(), || "seeds must not be empty".into())?;
        check(s.num_tasks >= 1, || "scenario.num_tasks must be at least 1".into())?;
        if let Some(a) = s.alpha {
            check(a.is_finite() && a > 0.0, || format!("scenario.alpha must be positive, got {a}"))?;
        }
        if let Some(g) = self.gamma {
            check(g > 0.0 && g <= 1.0, || format!("gamma must lie in (0, 1], got {g}"))?;
        }
        check(s.max_train != Some(0), || "scenario.max_train must be positive".into())?;
        check(s.max_per_task != Some(0), || "scenario.max_per_task must be positive".into())?;
        check(s.max_per_task.is_none() || s.policy == Policy::Toy, || "scenario.max_per_task applies to the toy split only".into())?;
        match s.policy {
            Policy::SequentialDatasets => {
                check(s.sequence.len() >= 2, || "sequential_datasets needs at least two entries in scenario.sequence".into())?;
                check(s.num_tasks.is_multiple_of(s.sequence.len()), || {
                    format!("scenario.num_tasks ({}) must be a multiple of the sequence length ({})", s.num_tasks, s.sequence.len())
                })?;
                let shape = image_shape(s.sequence[0]);
                check(s.sequence.iter().all(|&d| image_shape(d) == shape), || "sequenced datasets must share an image shape".into())?;
            }
            Policy::Toy => check(self.dataset != DatasetId::Celeba, || "the toy split needs digit classes 0, 1 and 2".into())?,
            _ => check(s.sequence.is_empty(), || "scenario.sequence is only used by sequential_datasets".into())?,
        }
        if self.dataset == DatasetId::Celeba && self.method == Method::MultibandGan {
            return Err(Error::Config("no GAN architecture is defined for celeba".into()));
        }

        let v = &self.vae;
        check(v.batch > 0, || "vae.batch must be positive".into())?;
        check_rate("vae.lr", v.lr)?;
        check_decay("vae.decay", v.decay)?;
        check(v.temperature > 0.0, || "vae.temperature must be positive".into())?;
        check(v.code_width >= 1 && v.code_width <= 32, || "vae.code_width must lie in 1..=32".into())?;
        check(v.cont_dim != Some(0), || "vae.cont_dim must be positive".into())?;
        if self.ablation.conv && v.arch == Some(VaeArch::Dense) {
            return Err(Error::Config("ablation.conv is set but vae.arch is dense".into()));
        }
        if let Some(a) = v.arch {
            let [_, h, _] = image_shape(self.dataset);
            let side = if a == VaeArch::ConvCeleba { 32 } else { 28 };
            check(a == VaeArch::Dense || h == side, || format!("vae.arch {a:?} does not fit {h}x{h} images"))?;
        }
        if let (Some(VaeArch::ConvCeleba), Some(z)) = (v.arch, v.latent_dim) {
            check(z % 16 == 0, || "the celeba decoder needs vae.latent_dim divisible by 16".into())?;
        }

        let g = &self.gan;
        check(g.batch > 0 && g.critic_steps > 0, || "gan.batch and gan.critic_steps must be positive".into())?;
        check_rate("gan.lr_local", g.lr_local)?;
        check_rate("gan.lr_global", g.lr_global)?;
        check_decay("gan.decay", g.decay)?;
        check((0.0..1.0).contains(&g.beta1) && (0.0..1.0).contains(&g.beta2), || "gan betas must lie in [0, 1)".into())?;
        check(g.lambda_gp >= 0.0, || "gan.lambda_gp must be non-negative".into())?;

        let c = &self.clf;
        check(!c.enabled || self.method != Method::Gr, || "the classifier stage needs a multiband method".into())?;
        check(c.batch > 0 && c.samples_per_task > 0, || "clf.batch and clf.samples_per_task must be positive".into())?;
        check_rate("clf.lr", c.lr)?;
        check_decay("clf.decay", c.decay)?;

        let e = &self.eval;
        check(e.samples >= 2, || "eval.samples must be at least 2".into())?;
        check(e.prd_clusters >= 1 && e.prd_angles >= 2 && e.prd_runs >= 1, || "eval PRD settings must be positive".into())?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the resolved config, leaving out
    /// seeds and paths.
    pub fn hash(&self) -> Result<String> {
        let r = self.resolved()?;
        let mut v = serde_json::to_value(&r)?;
        if let Some(m) = v.as_object_mut() {
            for k in ["seeds", "out_dir", "data_root"] {
                m.remove(k);
            }
        }
        // serde_json maps are ordered by key, so this text is canonical
        let text = serde_json::to_string(&v)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Short form used in file names.
    pub fn short_hash(&self) -> Result<String> {
        Ok(self.hash()?[..12].to_string())
    }

    // ----- views used by the training stages (call on a resolved config) ----

    pub fn vae_arch(&self) -> VaeArch {
        self.vae.arch.unwrap_or(VaeArch::Dense)
    }

    pub fn translator_spec(&self) -> TranslatorSpec {
        match self.method {
            Method::MultibandGan => TranslatorSpec {
                cont_dim: self.gan.noise_dim.unwrap_or(8),
                bin_dim: 0,
                code_width: self.vae.code_width,
                hidden: self.gan.translator_hidden.unwrap_or(192),
                out_dim: self.gan.latent_dim,
                identity: !self.ablation.translator,
            },
            _ => TranslatorSpec {
                cont_dim: self.vae.cont_dim.unwrap_or(8),
                bin_dim: self.vae.bin_dim.unwrap_or(0),
                code_width: self.vae.code_width,
                hidden: self.vae.translator_hidden.unwrap_or(192),
                out_dim: self.vae.latent_dim.unwrap_or(384),
                identity: !self.ablation.translator,
            },
        }
    }

    pub fn local_vae_train(&self) -> VaeTrainConfig {
        let v = &self.vae;
        VaeTrainConfig { epochs: v.local_epochs, batch: v.batch, lr: v.lr, decay: v.decay, temperature: v.temperature }
    }

    /// Replay baseline: the aligned method's local plus global epochs.
    pub fn gr_train(&self) -> VaeTrainConfig {
        VaeTrainConfig { epochs: self.vae.local_epochs + self.vae.global_epochs, ..self.local_vae_train() }
    }

    pub fn vae_consolidation(&self) -> ConsolidationConfig {
        let v = &self.vae;
        ConsolidationConfig {
            phase1_epochs: v.phase1_epochs,
            phase2_epochs: v.global_epochs,
            batch: v.batch,
            lr: v.lr,
            decay: v.decay,
            beta1: 0.9,
            beta2: 0.999,
            gamma: if self.ablation.controlled_forgetting { self.gamma } else { None },
            max_similarity_rows: v.similarity_rows,
            temperature: v.temperature,
        }
    }

    pub fn local_gan_train(&self) -> GanTrainConfig {
        let g = &self.gan;
        GanTrainConfig {
            epochs: g.local_epochs,
            batch: g.batch,
            lr: g.lr_local,
            decay: g.decay,
            beta1: g.beta1,
            beta2: g.beta2,
            lambda_gp: g.lambda_gp,
            critic_steps: g.critic_steps,
        }
    }

    pub fn gan_consolidation(&self) -> ConsolidationConfig {
        let g = &self.gan;
        ConsolidationConfig {
            phase1_epochs: g.phase1_epochs,
            phase2_epochs: g.global_epochs,
            batch: g.batch,
            lr: g.lr_global,
            decay: g.decay,
            beta1: g.beta1,
            beta2: g.beta2,
            gamma: None,
            max_similarity_rows: 0,
            temperature: self.vae.temperature,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        let c = &self.clf;
        ClassifierConfig {
            fe_epochs: c.epochs_fe,
            head_epochs: c.epochs_head,
            batch: c.batch,
            lr: c.lr,
            decay: c.decay,
            samples_per_task: c.samples_per_task,
            current_source: c.current_task_source,
        }
    }

    pub fn prd(&self) -> PrdConfig {
        PrdConfig {
            num_clusters: self.eval.prd_clusters,
            num_angles: self.eval.prd_angles,
            num_runs: self.eval.prd_runs,
            ..PrdConfig::default()
        }
    }

    pub fn feature_net(&self) -> FeatureNetConfig {
        FeatureNetConfig { epochs: self.eval.feature_net_epochs, ..FeatureNetConfig::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_hyperparameters() {
        let c = ExperimentConfig::default().resolved().unwrap();
        assert_eq!((c.vae.local_epochs, c.vae.global_epochs, c.vae.phase1_epochs), (70, 140, 5));
        assert_eq!((c.gan.local_epochs, c.gan.global_epochs, c.gan.critic_steps), (120, 200, 5));
        assert_eq!((c.clf.epochs_fe, c.clf.epochs_head, c.clf.batch), (100, 20, 256));
        assert_eq!(c.gamma, Some(1.0));
        assert_eq!(c.translator_spec().out_dim, 384);
        assert_eq!(c.gr_train().epochs, 210);
    }

    #[test]
    fn gamma_out_of_range_is_rejected() {
        let c = ExperimentConfig { gamma: Some(1.5), ..Default::default() };
        assert!(matches!(c.resolved(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("dataset = \"mnist\"\nlearning_rate = 3").is_err());
        assert!(ExperimentConfig::from_toml("[vae]\nlatnt_dim = 3").is_err());
    }

    #[test]
    fn explicit_defaults_hash_like_implicit_ones() {
        let a = ExperimentConfig::from_toml("dataset = \"mnist\"\n[scenario]\npolicy = \"dirichlet\"").unwrap();
        let b = ExperimentConfig::from_toml(
            "gamma = 0.95\nseeds = [7]\n[scenario]\npolicy = \"dirichlet\"\nalpha = 1.0\n[vae]\ncont_dim = 8\nlatent_dim = 384",
        )
        .unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig { gamma: Some(0.9), ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::default().resolved().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
