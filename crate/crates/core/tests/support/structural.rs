//! Small end-to-end runs on synthetic data for structural checks.

use std::path::{Path, PathBuf};

use multiband::alignment::{controlled_forgetting, BundleKind, rehearsal_per_batch, GlobalLatentSet, RehearsalSet};
use multiband::checkpoint::read_meta;
use multiband::config::ExperimentConfig;
use multiband::runner::{run_seed, Session, SessionOptions};
use multiband::tensor::Tensor;

pub fn config(out: &Path, method: &str, tasks: usize, classifier: bool, gamma: Option<f64>) -> ExperimentConfig {
    let gamma = gamma.map(|g| format!("gamma = {g}\n")).unwrap_or_default();
    let text = format!(
        r#"
dataset = "synthetic"
method = "{method}"
seeds = [5]
out_dir = "{}"
{gamma}
[scenario]
policy = "class_incremental"
num_tasks = {tasks}
max_train = 500

[vae]
local_epochs = 1
global_epochs = 1
phase1_epochs = 1

[gan]
local_epochs = 1
global_epochs = 1
phase1_epochs = 1

[clf]
enabled = {classifier}
epochs_fe = 1
epochs_head = 1
samples_per_task = 60

[eval]
samples = 40
feature_net_epochs = 1
prd_runs = 1
grid_columns = 2
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).expect("valid test config")
}

pub fn run(cfg: &ExperimentConfig) -> Session {
    run_seed(cfg, cfg.seeds[0], SessionOptions { echo: false, resume: false }).expect("run completes")
}

/// Every consolidation left the global model bitwise untouched in phase 1.
pub fn phase1_frozen(s: &Session) -> bool {
    let stats: Vec<_> = s.records.iter().filter_map(|r| r.consolidation.as_ref()).collect();
    !stats.is_empty() && stats.iter().all(|c| c.global_unchanged_after_phase1)
}

/// Rehearsal per mini-batch never exceeds `batch * tasks * 0.5`.
pub fn rehearsal_within_cap(s: &Session) -> bool {
    s.records.iter().all(|r| match (&r.consolidation, r.gr_max_rehearsal_per_batch, r.gr_rehearsal_cap) {
        (Some(c), _, _) => c.max_rehearsal_per_batch <= c.rehearsal_cap,
        (None, Some(m), Some(cap)) => m <= cap,
        _ => true,
    })
}

pub fn rehearsal_cap_formula() -> bool {
    (1..=10).all(|t| {
        let b = 64;
        rehearsal_per_batch(b, t) <= b * t / 2 && rehearsal_per_batch(b, t) == (b * (t - 1)).min(b * t / 2)
    })
}

/// Tensor names of every checkpoint fall under the allowed prefixes.
pub fn checkpoint_names_ok(s: &Session) -> bool {
    let allowed = ["translator.", "global.", "clf.fe.", "clf.head."];
    checkpoints(s).iter().all(|p| {
        let meta = read_meta(p).expect("sidecar");
        meta.tensors.iter().all(|n| allowed.iter().any(|a| n.starts_with(a)))
            && meta.tensors.iter().any(|n| n.starts_with("global."))
            && meta.priors.len() == if meta.kind == BundleKind::Vae { meta.tasks_seen } else { 0 }
    })
}

pub fn checkpoints(s: &Session) -> Vec<PathBuf> {
    s.artifacts().checkpoints
}

/// Largest relative spread of checkpoint file sizes.
pub fn size_spread(s: &Session) -> f64 {
    let sizes: Vec<f64> = checkpoints(s).iter().map(|p| std::fs::metadata(p).unwrap().len() as f64).collect();
    let lo = sizes.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sizes.iter().cloned().fold(0.0, f64::max);
    (hi - lo) / lo
}

fn pairs(n: usize) -> RehearsalSet<f64> {
    RehearsalSet {
        cont: Tensor::zeros(&[n, 2]),
        bin: None,
        tasks: vec![0; n],
        targets: Tensor::zeros(&[n, 4]),
        substituted: vec![false; n],
    }
}

/// Substitutions at `gamma` for rehearsal embeddings that duplicate current
/// ones, and for embeddings orthogonal to all of them. Returns
/// `(duplicates substituted, orthogonal substituted, targets copied right)`.
pub fn forgetting_counts(gamma: f64) -> (usize, usize, bool) {
    let current = Tensor::from_vec(&[3, 6], {
        let mut v = vec![0.0; 18];
        v[0] = 1.0;
        v[7] = 2.0;
        v[14] = 0.5;
        v
    });
    let set = GlobalLatentSet { vectors: current.clone(), rows: vec![2, 0, 1] };
    let images = Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f64).collect());
    let dup = Tensor::from_vec(&[3, 6], current.data().iter().map(|v| v * 3.0).collect());
    let mut p = pairs(3);
    let d = controlled_forgetting(&mut p, &dup, &set, &images, gamma);
    let copied = (0..3).all(|j| p.targets.row(j) == images.row(set.rows[j]));
    let mut orth = vec![0.0; 18];
    orth[3] = 1.0;
    orth[10] = -1.0;
    orth[17] = 4.0;
    let mut q = pairs(3);
    let o = controlled_forgetting(&mut q, &Tensor::from_vec(&[3, 6], orth), &set, &images, gamma);
    (d, o, copied)
}
