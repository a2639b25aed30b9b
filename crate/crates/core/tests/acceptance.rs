//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! `MULTIBAND_ACCEPTANCE=4,5` runs a subset; the default is all of them.
//! Criteria 1 to 3 train on the MNIST files under `data/` at the repo root
//! and keep their run directories under the target tmp dir for inspection.

#[allow(dead_code)]
#[path = "support/gradcheck.rs"]
mod gradcheck;
#[allow(dead_code)]
#[path = "support/oracles.rs"]
mod oracles;
#[allow(dead_code)]
#[path = "support/structural.rs"]
mod structural;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use multiband::config::ExperimentConfig;
use multiband::runner::{run_ablation, run_seed, run_toy, SessionOptions};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

const QUIET: SessionOptions = SessionOptions { echo: false, resume: false };

fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn work_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn mnist_config(name: &str, body: &str) -> Result<ExperimentConfig, String> {
    let text = format!(
        "dataset = \"mnist\"\ndata_root = {:?}\nout_dir = {:?}\n{body}",
        data_root().display().to_string(),
        work_dir(name).display().to_string()
    );
    let cfg = ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?;
    cfg.resolved().map_err(|e| e.to_string())
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_alignment() -> Outcome {
    let cfg = mnist_config(
        "toy",
        r#"
method = "multiband_vae"
seeds = [0]

[scenario]
policy = "toy"

[vae]
local_epochs = 20
global_epochs = 40
phase1_epochs = 5

[eval]
samples = 1000
"#,
    )?;
    let started = Instant::now();
    let r = run_toy(&cfg, 0, QUIET, 500).map_err(|e| e.to_string())?;
    let mins = started.elapsed().as_secs_f64() / 60.0;
    let a = r.similarity_margin() >= 0.1;
    let b = r.drift_gr > r.drift_aligned;
    verdict(
        a && b,
        format!(
            "(a) margin {:.3} (same {:.3}, other {:.3}) {}; (b) class-0 drift GR {:.3} vs aligned {:.3} {}; {mins:.1} min",
            r.similarity_margin(),
            r.cos_same_class,
            r.cos_other_class,
            if a { "ok" } else { "FAIL" },
            r.drift_gr,
            r.drift_aligned,
            if b { "ok" } else { "FAIL" },
        ),
    )
}

fn ablation_direction() -> Outcome {
    let cfg = mnist_config(
        "ablation",
        r#"
method = "multiband_vae"
seeds = [0, 1, 2]

[scenario]
policy = "dirichlet"
num_tasks = 5
alpha = 1.0
max_train = 10000

[vae]
local_epochs = 20
global_epochs = 40

[eval]
every_task = false
"#,
    )?;
    let budget = Duration::from_secs(2 * 3600);
    let t = run_ablation(&cfg, QUIET, Some(budget)).map_err(|e| e.to_string())?;
    let fid = |i: usize| t.rows.get(i).filter(|r| r.complete).and_then(|r| r.mean_fid());
    let table: Vec<String> =
        t.rows.iter().map(|r| format!("{} {}", r.name, r.mean_fid().map_or("n/a".into(), |v| format!("{v:.1}")))).collect();
    let detail = format!("{}; {:.0} min", table.join(", "), t.elapsed_secs / 60.0);
    match (fid(0), fid(1), fid(t.rows.len().saturating_sub(1))) {
        (Some(gr), Some(two), Some(full)) if t.finished => {
            let ok = two <= 0.7 * gr && full <= 0.5 * gr;
            let falling = (1..3).all(|i| matches!((fid(i - 1), fid(i)), (Some(a), Some(b)) if b < a));
            verdict(
                ok,
                format!("two-step/GR {:.2}, full/GR {:.2}, falling to translator {falling}; {detail}", two / gr, full / gr),
            )
        }
        _ => Err(format!("ladder did not finish within 2 h; {detail}")),
    }
}

fn classifier_gain() -> Outcome {
    let cfg = mnist_config(
        "classifier",
        r#"
method = "multiband_vae"
seeds = [0, 1, 2]

[scenario]
policy = "class_incremental"
num_tasks = 5

[vae]
local_epochs = 40
global_epochs = 80
phase1_epochs = 5

[clf]
enabled = true
epochs_fe = 100
epochs_head = 20

[eval]
samples = 500
every_task = false
"#,
    )?;
    let (mut acc, mut gap) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let s = run_seed(&cfg, seed, QUIET).map_err(|e| e.to_string())?;
        let a = s.report.final_accuracy().ok_or("no classifier accuracy")?;
        let f = s.report.finetune_accuracy.last().copied().flatten().ok_or("no fine-tune accuracy")?;
        acc.push(a);
        gap.push(a - f);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, g) = (mean(&acc) * 100.0, mean(&gap) * 100.0);
    // two points of tolerance on the mean
    verdict(a >= 83.0 && g >= 38.0, format!("mean accuracy {a:.1}% (need 85 +- 2), gain over fine-tune {g:.1} points (need 40 +- 2)"))
}

fn metric_oracles() -> Outcome {
    let mut bad = Vec::new();
    let fs = oracles::fid_self();
    if fs > 1e-6 {
        bad.push(format!("fid(A,A) = {fs:e}"));
    }
    for (got, want) in oracles::fid_closed_forms() {
        if (got - want).abs() >= 1e-3 {
            bad.push(format!("closed-form fid {got} vs {want}"));
        }
    }
    let ((p1, r1), (p0, r0)) = oracles::precision_recall_extremes();
    if (1.0 - p1) > 0.05 || (1.0 - r1) > 0.05 || p0 > 0.05 || r0 > 0.05 {
        bad.push(format!("precision/recall extremes ({p1:.3},{r1:.3}) ({p0:.3},{r0:.3})"));
    }
    for (got, want) in oracles::wasserstein_hand_cases() {
        if got != want {
            bad.push(format!("wasserstein {got} vs {want}"));
        }
    }
    let p = oracles::task_id_uniformity_p(10_000, 5);
    if p <= 0.01 {
        bad.push(format!("task-id uniformity p = {p:.4}"));
    }
    verdict(bad.is_empty(), if bad.is_empty() { format!("all oracles hold (uniformity p = {p:.3})") } else { bad.join("; ") })
}

fn gradient_suite() -> Outcome {
    let all = gradcheck::all();
    let worst = all.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail: Vec<String> = all.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(worst < 1e-4, detail.join(", "))
}

fn structural_invariants() -> Outcome {
    let mut bad = Vec::new();
    let (dup, orth, copied) = structural::forgetting_counts(0.9);
    if dup != 3 || orth != 0 || !copied {
        bad.push(format!("controlled forgetting: {dup}/3 duplicates, {orth}/3 orthogonal substituted"));
    }
    if !structural::rehearsal_cap_formula() {
        bad.push("rehearsal cap formula".into());
    }
    let dir = work_dir("structural");
    let _ = std::fs::remove_dir_all(&dir);
    let s = structural::run(&structural::config(&dir, "multiband_vae", 5, true, Some(0.9)));
    if !structural::phase1_frozen(&s) {
        bad.push("global model changed during phase 1".into());
    }
    if !structural::rehearsal_within_cap(&s) {
        bad.push("rehearsal cap exceeded".into());
    }
    if !structural::checkpoint_names_ok(&s) {
        bad.push("checkpoint holds more than translator, global model and priors".into());
    }
    let spread = structural::size_spread(&s);
    if spread > 0.01 || structural::checkpoints(&s).len() != 5 {
        bad.push(format!("checkpoint size spread {spread:.4}"));
    }
    verdict(bad.is_empty(), if bad.is_empty() { format!("5-task run, checkpoint size spread {spread:.4}") } else { bad.join("; ") })
}

fn determinism_and_resume() -> Outcome {
    let dir = work_dir("determinism");
    let _ = std::fs::remove_dir_all(&dir);
    let mut bad = Vec::new();
    let cfg = structural::config(&dir, "multiband_vae", 3, true, Some(0.9));
    let d = determinism::rerun_differences(&cfg, &dir.join("rerun"));
    if !d.is_empty() {
        bad.push(format!("rerun differs in {}", d.join(", ")));
    }
    for method in ["multiband_vae", "multiband_gan", "gr"] {
        let cfg = structural::config(&dir, method, 3, method == "multiband_vae", None);
        let d = determinism::resume_differences(&cfg, &dir.join(method), 1);
        if !d.is_empty() {
            bad.push(format!("{method} resume differs in {}", d.join(", ")));
        }
    }
    verdict(bad.is_empty(), if bad.is_empty() { "reruns and resumes byte-identical".into() } else { bad.join("; ") })
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        (1, "toy alignment", toy_alignment),
        (2, "ablation direction", ablation_direction),
        (3, "classifier gain", classifier_gain),
        (4, "metric oracles", metric_oracles),
        (5, "gradient checks", gradient_suite),
        (6, "structural invariants", structural_invariants),
        (7, "determinism and resume", determinism_and_resume),
    ];
    let selected: Option<Vec<usize>> = std::env::var("MULTIBAND_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, check) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            println!("criterion {id} {name}: SKIP (not selected)");
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id} {name}: PASS ({d}) [{secs:.0}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({d}) [{secs:.0}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
