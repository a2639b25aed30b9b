#[path = "support/structural.rs"]
mod structural;

use tempfile::tempdir;

#[test]
fn duplicates_are_substituted_and_orthogonal_codes_are_not() {
    let (dup, orth, copied) = structural::forgetting_counts(0.9);
    assert_eq!(dup, 3);
    assert_eq!(orth, 0);
    assert!(copied);
}

#[test]
fn rehearsal_cap_formula_holds() {
    assert!(structural::rehearsal_cap_formula());
}

#[test]
fn vae_run_keeps_structural_contracts() {
    let dir = tempdir().unwrap();
    let s = structural::run(&structural::config(dir.path(), "multiband_vae", 5, true, Some(0.9)));
    assert_eq!(structural::checkpoints(&s).len(), 5);
    assert!(structural::phase1_frozen(&s));
    assert!(structural::rehearsal_within_cap(&s));
    assert!(structural::checkpoint_names_ok(&s));
    let spread = structural::size_spread(&s);
    assert!(spread <= 0.01, "checkpoint sizes vary by {spread}");
}

#[test]
fn gan_run_keeps_structural_contracts() {
    let dir = tempdir().unwrap();
    let s = structural::run(&structural::config(dir.path(), "multiband_gan", 3, false, None));
    assert!(structural::phase1_frozen(&s));
    assert!(structural::rehearsal_within_cap(&s));
    assert!(structural::checkpoint_names_ok(&s));
    assert!(structural::size_spread(&s) <= 0.01);
}

#[test]
fn replay_baseline_respects_rehearsal_cap() {
    let dir = tempdir().unwrap();
    let s = structural::run(&structural::config(dir.path(), "gr", 3, false, None));
    assert!(s.records.iter().any(|r| r.gr_max_rehearsal_per_batch.is_some()));
    assert!(structural::rehearsal_within_cap(&s));
}

#[test]
fn spent_ablation_budget_stops_before_training() {
    let dir = tempdir().unwrap();
    let cfg = structural::config(dir.path(), "multiband_vae", 2, false, None);
    let opts = multiband::runner::SessionOptions::default();
    let t = multiband::runner::run_ablation(&cfg, opts, Some(std::time::Duration::ZERO)).unwrap();
    assert!(!t.finished);
    assert_eq!(t.rows.len(), 1);
    assert!(t.rows[0].fid.is_empty() && !t.rows[0].complete);
    assert!(std::fs::read_dir(dir.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("ablation_")));
}
