use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use multiband_ffi::*;

fn last_error() -> String {
    let n = unsafe { mb_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n + 1];
    unsafe { mb_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn tiny_config(dir: &Path) -> CString {
    let text = format!(
        r#"
dataset = "synthetic"
method = "multiband_vae"
seeds = [3]
out_dir = "{}"

[scenario]
policy = "class_incremental"
num_tasks = 2
max_train = 300

[vae]
local_epochs = 1
global_epochs = 1
phase1_epochs = 1

[eval]
samples = 50
feature_net_epochs = 1
prd_runs = 1
grid_columns = 2
"#,
        dir.join("runs").display()
    );
    let p = dir.join("tiny.toml");
    std::fs::write(&p, text).unwrap();
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn metrics_through_the_c_abi() {
    let a = [0.0, 1.0, 2.0];
    let b = [1.0, 2.0, 3.0];
    let mut w = -1.0;
    assert_eq!(unsafe { mb_wasserstein_1d(a.as_ptr(), 3, b.as_ptr(), 3, &mut w) }, MbStatus::Ok);
    assert!((w - 1.0).abs() < 1e-12);

    let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
    let mut f = -1.0;
    assert_eq!(unsafe { mb_fid(x.as_ptr(), 20, x.as_ptr(), 20, 2, &mut f) }, MbStatus::Ok);
    assert!(f.abs() < 1e-6);

    let (mut p, mut r) = (0.0, 0.0);
    let st = unsafe { mb_precision_recall(x.as_ptr(), 20, x.as_ptr(), 20, 2, 4, 101, 2, 0, &mut p, &mut r) };
    assert_eq!(st, MbStatus::Ok);
    assert!(p > 0.95 && r > 0.95, "{p} {r}");
}

#[test]
fn errors_set_codes_and_messages() {
    let a = [1.0];
    assert_eq!(unsafe { mb_wasserstein_1d(a.as_ptr(), 1, a.as_ptr(), 1, ptr::null_mut()) }, MbStatus::NullPointer);
    assert!(last_error().contains("out"));
    let mut w = 0.0;
    assert_ne!(unsafe { mb_wasserstein_1d(a.as_ptr(), 1, a.as_ptr(), 0, &mut w) }, MbStatus::Ok);
    assert!(!last_error().is_empty());
    let missing = CString::new("/nonexistent/task_01.bundle").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mb_model_load(missing.as_ptr(), &mut m) }, MbStatus::Load);
    assert!(m.is_null());
    assert!(last_error().contains("nonexistent"));
    // success clears the message
    assert_eq!(unsafe { mb_wasserstein_1d(a.as_ptr(), 1, a.as_ptr(), 1, &mut w) }, MbStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe { mb_model_free(ptr::null_mut()) };
}

#[test]
fn run_load_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(unsafe { mb_run(cfg.as_ptr(), false) }, MbStatus::Ok, "{}", last_error());
    let bundle = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .flatten()
        .find(|e| e.path().is_dir() && e.file_name() != "cache")
        .unwrap()
        .path()
        .join("checkpoints/task_02.bundle");
    let path = CString::new(bundle.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mb_model_load(path.as_ptr(), &mut m) }, MbStatus::Ok, "{}", last_error());
    let mut seen = 0;
    assert_eq!(unsafe { mb_model_tasks_seen(m, &mut seen) }, MbStatus::Ok);
    assert_eq!(seen, 2);
    let mut shape = [0usize; 3];
    assert_eq!(unsafe { mb_model_image_shape(m, shape.as_mut_ptr()) }, MbStatus::Ok);
    let per = shape.iter().product::<usize>();
    let mut a = vec![0f32; 4 * per];
    let mut b = vec![0f32; 4 * per];
    assert_eq!(unsafe { mb_model_sample(m, 1, 4, 9, a.as_mut_ptr(), a.len()) }, MbStatus::Ok);
    assert_eq!(unsafe { mb_model_sample(m, 1, 4, 9, b.as_mut_ptr(), b.len()) }, MbStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(unsafe { mb_model_sample(m, 2, 4, 9, a.as_mut_ptr(), a.len()) }, MbStatus::InvalidArgument);
    assert_eq!(unsafe { mb_model_sample(m, 0, 4, 9, a.as_mut_ptr(), a.len() - 1) }, MbStatus::InvalidArgument);
    unsafe { mb_model_free(m) };
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/multiband.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["mb_last_error", "mb_run", "mb_model_load", "mb_model_free", "mb_model_sample", "mb_fid", "mb_wasserstein_1d", "mb_precision_recall"] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(text.contains("typedef struct MbModel MbModel;"));
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"multiband.h\"\nint main(void) { MbModel *m = 0; mb_model_free(m); return MB_STATUS_OK; }\n").unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg("-I").arg(header.parent().unwrap()).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler found; syntax check skipped"),
    }
}
