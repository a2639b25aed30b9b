//! Byte-level comparison of run outputs across reruns and resumes.

use std::path::Path;

use multiband::config::ExperimentConfig;
use multiband::runner::{run_seed, RunArtifacts, Session, SessionOptions};

const QUIET: SessionOptions = SessionOptions { echo: false, resume: false };

fn with_out(cfg: &ExperimentConfig, out: &Path) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.out_dir = out.to_path_buf();
    c
}

fn files(a: &RunArtifacts) -> Vec<std::path::PathBuf> {
    let mut v = vec![a.metrics_csv.clone(), a.metrics_json.clone()];
    v.extend(a.grids.iter().cloned());
    v.extend(a.checkpoints.iter().cloned());
    v
}

/// Names of output files that differ between two runs (empty when identical).
fn differing(a: &RunArtifacts, b: &RunArtifacts) -> Vec<String> {
    let (fa, fb) = (files(a), files(b));
    if fa.len() != fb.len() {
        return vec![format!("{} vs {} files", fa.len(), fb.len())];
    }
    fa.iter()
        .zip(&fb)
        .filter(|(x, y)| std::fs::read(x).ok() != std::fs::read(y).ok())
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect()
}

/// Two fresh runs with the same seed.
pub fn rerun_differences(cfg: &ExperimentConfig, root: &Path) -> Vec<String> {
    let seed = cfg.seeds[0];
    let a = run_seed(&with_out(cfg, &root.join("a")), seed, QUIET).unwrap().artifacts();
    let b = run_seed(&with_out(cfg, &root.join("b")), seed, QUIET).unwrap().artifacts();
    differing(&a, &b)
}

/// An uninterrupted run against one stopped after `stop` tasks and resumed.
pub fn resume_differences(cfg: &ExperimentConfig, root: &Path, stop: usize) -> Vec<String> {
    let seed = cfg.seeds[0];
    let full = run_seed(&with_out(cfg, &root.join("full")), seed, QUIET).unwrap().artifacts();
    let cut = with_out(cfg, &root.join("cut"));
    {
        let mut s = Session::new(&cut, seed, QUIET).unwrap();
        for _ in 0..stop {
            s.step_task().unwrap();
        }
    }
    let resumed = run_seed(&cut, seed, SessionOptions { echo: false, resume: true }).unwrap();
    assert_eq!(resumed.next_task, full.checkpoints.len());
    differing(&full, &resumed.artifacts())
}
