//! C ABI over the multiband toolkit.
//!
//! Every function returns an [`MbStatus`]; on failure the message is kept
//! per thread and read back with [`mb_last_error`]. Models cross the
//! boundary as opaque [`MbModel`] handles owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use multiband::config::ExperimentConfig;
use multiband::metrics::{fid, precision_recall, wasserstein_1d, PrdConfig};
use multiband::rng::{self, tag};
use multiband::runner::{generate_from, load_checkpoint_model, run_experiment, LoadedCheckpoint, SessionOptions};
use multiband::tensor::Tensor;
use multiband::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Load = 4,
    Numerical = 5,
    Contract = 6,
    Checkpoint = 7,
    Io = 8,
    /// A Rust panic was caught at the boundary.
    Panic = 9,
}

/// A generative model restored from a task checkpoint.
pub struct MbModel {
    inner: LoadedCheckpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> MbStatus {
    match e {
        Error::Config(_) => MbStatus::Config,
        Error::Load { .. } => MbStatus::Load,
        Error::Numerical(_) => MbStatus::Numerical,
        Error::Contract(_) => MbStatus::Contract,
        Error::Checkpoint(_) | Error::Json(_) => MbStatus::Checkpoint,
        Error::Io(_) | Error::Image(_) => MbStatus::Io,
    }
}

struct Fail(MbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MbStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MbStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MbStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(MbStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| bad(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, dim: usize, what: &str) -> Result<Tensor<f64>, Fail> {
    let len = rows.checked_mul(dim).ok_or_else(|| bad(format!("{what} size overflows")))?;
    Ok(Tensor::from_vec(&[rows, dim], slice_arg(p, len, what)?.to_vec()))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes, so a
/// caller can size the buffer with a first call passing `len = 0`.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Run the experiment described by a TOML config file, every seed.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mb_run(config_path: *const c_char, resume: bool) -> MbStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let cfg = ExperimentConfig::load(&path)?;
        run_experiment(&cfg, SessionOptions { echo: false, resume })?;
        Ok(())
    })
}

/// Load a task checkpoint. On success `*out` owns a new handle that must be
/// released with [`mb_model_free`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_model_load(path: *const c_char, out: *mut *mut MbModel) -> MbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let inner = load_checkpoint_model(&path)?;
        *out = Box::into_raw(Box::new(MbModel { inner }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`mb_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mb_model_free(model: *mut MbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tasks the model has been trained on.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_model_tasks_seen(model: *const MbModel, out: *mut usize) -> MbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.tasks_seen();
        Ok(())
    })
}

/// Channels, height and width of generated images.
///
/// # Safety
/// `model` must be a live handle and `out` valid for 3 writes.
#[no_mangle]
pub unsafe extern "C" fn mb_model_image_shape(model: *const MbModel, out: *mut usize) -> MbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = m.inner.image_shape();
        ptr::copy_nonoverlapping(shape.as_ptr(), out, 3);
        Ok(())
    })
}

/// Generate `n` images of task `task` with pixel values in `[0, 1]`,
/// row-major `[n, c, h, w]`. `out_len` must be at least `n * c * h * w`.
/// The same `seed` reproduces the same images.
///
/// # Safety
/// `model` must be a live handle and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mb_model_sample(
    model: *const MbModel,
    task: usize,
    n: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> MbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let seen = m.inner.tasks_seen();
        if task >= seen {
            return Err(bad(format!("task {task} not seen (model has {seen} tasks)")));
        }
        let [c, h, w] = m.inner.image_shape();
        let need = n * c * h * w;
        if out_len < need {
            return Err(bad(format!("output buffer holds {out_len} values, {need} needed")));
        }
        if n == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let mut r = rng::stream(seed, &[tag::SAMPLES, task as u64]);
        let x = generate_from(&m.inner.model, n, task, &mut r)?;
        ptr::copy_nonoverlapping(x.data().as_ptr(), out, need);
        Ok(())
    })
}

/// Frechet distance between Gaussian fits of two row-major `[n, dim]`
/// feature sets.
///
/// # Safety
/// `real` and `gen` must be valid for `n_real * dim` and `n_gen * dim`
/// reads; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_fid(
    real: *const f64,
    n_real: usize,
    gen: *const f64,
    n_gen: usize,
    dim: usize,
    out: *mut f64,
) -> MbStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let a = matrix_arg(real, n_real, dim, "real")?;
        let b = matrix_arg(gen, n_gen, dim, "gen")?;
        *out = fid(&a, &b)?;
        Ok(())
    })
}

/// Wasserstein-1 distance between two 1-D empirical distributions.
///
/// # Safety
/// `a` and `b` must be valid for `na` and `nb` reads; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_wasserstein_1d(a: *const f64, na: usize, b: *const f64, nb: usize, out: *mut f64) -> MbStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = wasserstein_1d(slice_arg(a, na, "a")?, slice_arg(b, nb, "b")?)?;
        Ok(())
    })
}

/// Precision and recall (F-beta summaries of the PRD curve) of `gen`
/// against `real`, both row-major `[n, dim]` feature sets.
///
/// # Safety
/// `real` and `gen` must be valid for `n_real * dim` and `n_gen * dim`
/// reads; `precision` and `recall` must be valid pointers.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mb_precision_recall(
    real: *const f64,
    n_real: usize,
    gen: *const f64,
    n_gen: usize,
    dim: usize,
    num_clusters: usize,
    num_angles: usize,
    num_runs: usize,
    seed: u64,
    precision: *mut f64,
    recall: *mut f64,
) -> MbStatus {
    guard(|| {
        let p = precision.as_mut().ok_or_else(|| null("precision"))?;
        let r = recall.as_mut().ok_or_else(|| null("recall"))?;
        let a = matrix_arg(real, n_real, dim, "real")?;
        let b = matrix_arg(gen, n_gen, dim, "gen")?;
        let cfg = PrdConfig { num_clusters, num_angles, num_runs, seed };
        (*p, *r) = precision_recall(&a, &b, &cfg)?;
        Ok(())
    })
}
