//! C ABI over `tmrd-core`.
//!
//! Every function returns a [`TmrdStatus`]. On failure the message is kept in
//! a thread-local buffer readable through [`tmrd_last_error`]. Objects cross
//! the boundary as opaque pointers created by `*_new`/`*_generate`/`*_load`
//! functions and released by the matching `*_free`. Strings returned to the
//! caller must be released with [`tmrd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tmrd::checks::{gradcheck, GradTarget};
use tmrd::scenes::{generate, read_dataset, write_dataset, Dataset, SceneConfig};
use tmrd::trainer::{checkpoint_load, checkpoint_save, metrics_csv, TrainConfig, TrainState, Trainer};
use tmrd::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TmrdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    /// Unknown key, bad value or failed validation.
    Config = 3,
    Io = 4,
    /// Malformed dataset or checkpoint file.
    Format = 5,
    /// Training produced non-finite values.
    Diverged = 6,
    /// Internal error; the library caught a panic.
    Internal = 7,
}

/// Generated scenes with their splits.
pub struct TmrdDataset {
    inner: Dataset,
}

/// Training configuration.
pub struct TmrdConfig {
    inner: TrainConfig,
}

/// A training run: its config, its own copy of the data and the current state.
pub struct TmrdRun {
    cfg: TrainConfig,
    data: Dataset,
    state: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TmrdStatus {
    match e {
        Error::Config(_) => TmrdStatus::Config,
        Error::Io(_) => TmrdStatus::Io,
        Error::Format(_) => TmrdStatus::Format,
        Error::Divergence { .. } | Error::NonFinite(_) => TmrdStatus::Diverged,
        Error::Shape { .. } | Error::InvalidArgument { .. } | Error::Misaligned(_) => TmrdStatus::InvalidArgument,
    }
}

struct Fail(TmrdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TmrdStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, recording any failure or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TmrdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TmrdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TmrdStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(TmrdStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tmrd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tmrd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `count` scenes, `round(count * ratio)` of them labeled, plus the default
/// test split.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn tmrd_dataset_generate(
    seed: u64,
    count: usize,
    ratio: f64,
    out: *mut *mut TmrdDataset,
) -> TmrdStatus {
    guard(|| {
        let inner = generate(&SceneConfig::default(), seed, count, ratio)?;
        put(out, TmrdDataset { inner })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_dataset_load(path: *const c_char, out: *mut *mut TmrdDataset) -> TmrdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = read_dataset(Path::new(path))?;
        put(out, TmrdDataset { inner })
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tmrd_dataset_save(ds: *const TmrdDataset, path: *const c_char) -> TmrdStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let path = str_arg(path, "path")?;
        Ok(write_dataset(&ds.inner, Path::new(path))?)
    })
}

/// Split sizes. Any output pointer may be null.
///
/// # Safety
/// `ds` must be a live dataset handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmrd_dataset_counts(
    ds: *const TmrdDataset,
    labeled: *mut usize,
    unlabeled: *mut usize,
    test: *mut usize,
) -> TmrdStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.inner;
        for (p, v) in [(labeled, ds.labeled.len()), (unlabeled, ds.unlabeled.len()), (test, ds.test.len())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmrd_dataset_free(ds: *mut TmrdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_config_default(out: *mut *mut TmrdConfig) -> TmrdStatus {
    guard(|| put(out, TmrdConfig { inner: TrainConfig::default() }))
}

/// Parses `key = value` lines over the defaults; every bad line is listed
/// in the error message.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_config_parse(text: *const c_char, out: *mut *mut TmrdConfig) -> TmrdStatus {
    guard(|| {
        let inner = TrainConfig::from_text(str_arg(text, "text")?)?;
        put(out, TmrdConfig { inner })
    })
}

/// Sets one key such as `train.seed`. Cross-field checks run when a run is
/// created.
///
/// # Safety
/// `cfg` must be a live config handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tmrd_config_set(cfg: *mut TmrdConfig, key: *const c_char, value: *const c_char) -> TmrdStatus {
    guard(|| {
        let cfg = mut_arg(cfg, "cfg")?;
        let (key, value) = (str_arg(key, "key")?, str_arg(value, "value")?);
        cfg.inner.set(key, value).map_err(|e| Fail(TmrdStatus::Config, e))
    })
}

/// The config as `key = value` text; release with [`tmrd_string_free`].
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_config_to_text(cfg: *const TmrdConfig, out: *mut *mut c_char) -> TmrdStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = owned_string(cfg.inner.to_text());
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmrd_config_free(cfg: *mut TmrdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// A fresh run at iteration 0. The run copies both the config and the data.
///
/// # Safety
/// `cfg` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_new(
    cfg: *const TmrdConfig,
    ds: *const TmrdDataset,
    out: *mut *mut TmrdRun,
) -> TmrdStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?.inner.clone();
        let data = ref_arg(ds, "ds")?.inner.clone();
        let state = Trainer::new(cfg.clone(), &data)?.init_state()?;
        put(out, TmrdRun { cfg, data, state })
    })
}

/// Trains until iteration `stop` (capped at the configured total).
///
/// # Safety
/// `run` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_until(run: *mut TmrdRun, stop: usize) -> TmrdStatus {
    guard(|| {
        let run = mut_arg(run, "run")?;
        let trainer = Trainer::new(run.cfg.clone(), &run.data)?;
        Ok(trainer.run_until(&mut run.state, stop)?)
    })
}

/// Next iteration to run.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_iteration(run: *const TmrdRun, out: *mut usize) -> TmrdStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        *mut_arg(out, "out")? = run.state.iteration;
        Ok(())
    })
}

/// Teacher AP50 and mAP on the test split and the mean teacher-student
/// representation KL. Any output pointer may be null.
///
/// # Safety
/// `run` must be a live run handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_evaluate(
    run: *const TmrdRun,
    ap50: *mut f64,
    map: *mut f64,
    repr_kl: *mut f64,
) -> TmrdStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let trainer = Trainer::new(run.cfg.clone(), &run.data)?;
        let (a, m, k) = trainer.evaluate_state(&run.state)?;
        for (p, v) in [(ap50, a), (map, m), (repr_kl, k)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// The metrics log so far as CSV; release with [`tmrd_string_free`].
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_metrics_csv(run: *const TmrdRun, out: *mut *mut c_char) -> TmrdStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = owned_string(metrics_csv(&run.state.history));
        Ok(())
    })
}

/// # Safety
/// `run` must be a live run handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_save(run: *const TmrdRun, path: *const c_char) -> TmrdStatus {
    guard(|| {
        let run = ref_arg(run, "run")?;
        let path = str_arg(path, "path")?;
        Ok(checkpoint_save(&run.cfg, &run.state, Path::new(path))?)
    })
}

/// Resumes a checkpoint against `ds`, which must be the dataset it was
/// trained on.
///
/// # Safety
/// `path` must be a NUL-terminated string, `ds` a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_load(
    path: *const c_char,
    ds: *const TmrdDataset,
    out: *mut *mut TmrdRun,
) -> TmrdStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let data = ref_arg(ds, "ds")?.inner.clone();
        let (cfg, state) = checkpoint_load(Path::new(path))?;
        Trainer::new(cfg.clone(), &data)?;
        put(out, TmrdRun { cfg, data, state })
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmrd_run_free(run: *mut TmrdRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Finite-difference check of one objective: 0 supervised loss, 1 refinement
/// loss in the scaling coefficients, 2 student objective. Writes the largest
/// relative error and whether it is within tolerance.
///
/// # Safety
/// Non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tmrd_gradcheck(
    target: u32,
    h: f64,
    seed: u64,
    max_rel_error: *mut f64,
    passed: *mut bool,
) -> TmrdStatus {
    guard(|| {
        let t = *GradTarget::ALL
            .get(target as usize)
            .ok_or_else(|| Fail(TmrdStatus::InvalidArgument, format!("unknown gradcheck target {target}")))?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(Fail(TmrdStatus::InvalidArgument, format!("step must be positive, got {h}")));
        }
        let r = gradcheck(t, h, seed)?;
        if !max_rel_error.is_null() {
            *max_rel_error = r.report.max_rel_error;
        }
        if !passed.is_null() {
            *passed = r.passed();
        }
        Ok(())
    })
}

/// Static version string of the library; never freed.
#[no_mangle]
pub extern "C" fn tmrd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
