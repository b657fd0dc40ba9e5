//! C ABI for embedding trained forecasters in other runtimes.
//!
//! Conventions:
//!
//! - Handles are opaque. Create them with the matching `_open` / `_load` /
//!   `_new` call and destroy them with `_close` / `_free`; destructors
//!   accept NULL as a no-op. A session copies what it needs, so the model
//!   and dataset handles it was built from can be freed right away.
//! - Every fallible call returns [`AsgnStatus`] and never unwinds. On any
//!   status other than `Ok`, [`asgn_last_error_message`] returns a
//!   description for the calling thread, valid until that thread's next
//!   failing call.
//! - Paths and messages are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use asgn_core::graphbuild::{
    build_cache, materialize_window, GraphConfig, SnapshotCache, WindowPlan,
};
use asgn_core::model::{predict_window, ModelLeaves};
use asgn_core::noise::ZeroNoise;
use asgn_core::structlearn::{AdjacencyMode, OpCounters};
use asgn_core::synthgen::{read_dataset, Dataset};
use asgn_core::tape::Tape;
use asgn_core::training::{load_checkpoint, Checkpoint};
use asgn_core::Error;

/// Result codes of every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsgnStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidString = 2,
    /// The file or directory could not be read.
    Io = 3,
    /// The input was understood but rejected (bad format, bad index,
    /// wrong buffer length).
    InvalidInput = 4,
    /// The checkpoint's dimensions do not fit the dataset.
    ShapeMismatch = 5,
    /// An internal invariant failed; the message carries the panic text.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes stripped");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn error_status(err: &Error) -> AsgnStatus {
    match err {
        Error::Io { .. } => AsgnStatus::Io,
        Error::Shape { .. } => AsgnStatus::ShapeMismatch,
        _ => AsgnStatus::InvalidInput,
    }
}

/// Runs `f` with unwinding contained; panics become `AsgnStatus::Panic`.
fn guarded(f: impl FnOnce() -> AsgnStatus) -> AsgnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            AsgnStatus::Panic
        }
    }
}

/// Converts a C path argument, reporting NULL and bad UTF-8.
///
/// # Safety
/// `ptr` must be NULL or point to a NUL-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, AsgnStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is NULL"));
        return Err(AsgnStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(AsgnStatus::InvalidString)
        }
    }
}

/// An opened dataset directory.
pub struct AsgnDataset {
    inner: Dataset,
}

/// A loaded training checkpoint.
pub struct AsgnModel {
    inner: Checkpoint,
}

/// A model bound to a dataset, with the snapshot graphs precomputed.
pub struct AsgnSession {
    ds: Dataset,
    ck: Checkpoint,
    gcfg: GraphConfig,
    cache: SnapshotCache,
}

/// The library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn asgn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the calling thread's most recent failure. Empty until a
/// call fails; valid until the thread's next failing call.
#[no_mangle]
pub extern "C" fn asgn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opens a dataset directory written by `asgn simulate`.
///
/// # Safety
/// `dir` must be NULL or NUL-terminated; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn asgn_dataset_open(
    dir: *const c_char,
    out: *mut *mut AsgnDataset,
) -> AsgnStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return AsgnStatus::NullArgument;
        }
        let path = match path_arg(dir, "dir") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_dataset(path) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(AsgnDataset { inner: ds }));
                AsgnStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                error_status(&e)
            }
        }
    })
}

/// Frees a dataset handle. NULL is a no-op.
///
/// # Safety
/// `ds` must be NULL or a pointer returned by [`asgn_dataset_open`] that
/// has not been closed yet.
#[no_mangle]
pub unsafe extern "C" fn asgn_dataset_close(ds: *mut AsgnDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of grid nodes; 0 if `ds` is NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn asgn_dataset_grid_count(ds: *const AsgnDataset) -> u64 {
    ds.as_ref().map_or(0, |d| d.inner.grid_count() as u64)
}

/// Number of time steps; 0 if `ds` is NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn asgn_dataset_steps(ds: *const AsgnDataset) -> u64 {
    ds.as_ref().map_or(0, |d| d.inner.steps() as u64)
}

/// Number of physical variables per node; 0 if `ds` is NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn asgn_dataset_var_count(ds: *const AsgnDataset) -> u64 {
    ds.as_ref().map_or(0, |d| d.inner.var_count() as u64)
}

/// Loads a checkpoint written by `asgn train`.
///
/// # Safety
/// `path` must be NULL or NUL-terminated; `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn asgn_model_load(
    path: *const c_char,
    out: *mut *mut AsgnModel,
) -> AsgnStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is NULL");
            return AsgnStatus::NullArgument;
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(path) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(AsgnModel { inner: ck }));
                AsgnStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                error_status(&e)
            }
        }
    })
}

/// Frees a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must be NULL or a pointer returned by [`asgn_model_load`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn asgn_model_free(model: *mut AsgnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input window length the model was trained with; 0 if `model` is NULL.
///
/// # Safety
/// `model` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn asgn_model_window(model: *const AsgnModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.config.window as u64)
}

fn session_new(ds: &Dataset, ck: &Checkpoint) -> Result<AsgnSession, Error> {
    let dims = ck.params.dims;
    let expected = asgn_core::model::ModelDims {
        var_count: ds.var_count(),
        families: ds.meta.config.family_table().len(),
        ..dims
    };
    if dims != expected {
        return Err(Error::Shape {
            op: "session",
            detail: format!(
                "checkpoint was trained for {} variables and {} platform families, \
                 dataset has {} and {}",
                dims.var_count, dims.families, expected.var_count, expected.families
            ),
        });
    }
    let gcfg = ck.config.graph_config();
    let cache = build_cache(ds, &gcfg)?;
    Ok(AsgnSession {
        ds: ds.clone(),
        ck: ck.clone(),
        gcfg,
        cache,
    })
}

/// Binds a model to a dataset and precomputes the per-step graphs. The
/// session owns copies, so both handles may be freed afterwards.
///
/// # Safety
/// `model` and `ds` must be live handles (or NULL); `out` must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn asgn_session_new(
    model: *const AsgnModel,
    ds: *const AsgnDataset,
    out: *mut *mut AsgnSession,
) -> AsgnStatus {
    guarded(|| {
        let (Some(model), Some(ds)) = (model.as_ref(), ds.as_ref()) else {
            set_error("model or dataset is NULL");
            return AsgnStatus::NullArgument;
        };
        if out.is_null() {
            set_error("out is NULL");
            return AsgnStatus::NullArgument;
        }
        match session_new(&ds.inner, &model.inner) {
            Ok(sess) => {
                *out = Box::into_raw(Box::new(sess));
                AsgnStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                error_status(&e)
            }
        }
    })
}

/// Frees a session. NULL is a no-op.
///
/// # Safety
/// `sess` must be NULL or a pointer returned by [`asgn_session_new`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn asgn_session_free(sess: *mut AsgnSession) {
    if !sess.is_null() {
        drop(Box::from_raw(sess));
    }
}

/// Variables each forecast produces (the required `out` length); 0 if
/// `sess` is NULL.
///
/// # Safety
/// `sess` must be NULL or a live session handle.
#[no_mangle]
pub unsafe extern "C" fn asgn_session_var_count(sess: *const AsgnSession) -> u64 {
    sess.as_ref().map_or(0, |s| s.ds.var_count() as u64)
}

/// Earliest valid `t_end` for [`asgn_session_forecast`]; 0 if `sess` is
/// NULL.
///
/// # Safety
/// `sess` must be NULL or a live session handle.
#[no_mangle]
pub unsafe extern "C" fn asgn_session_min_t_end(sess: *const AsgnSession) -> u64 {
    sess.as_ref().map_or(0, |s| s.gcfg.window as u64 - 1)
}

fn forecast(sess: &AsgnSession, target: u64, t_end: u64, out: &mut [f64]) -> Result<(), Error> {
    let cfg = &sess.ck.config;
    let vars = sess.ds.var_count();
    if out.len() != vars {
        return Err(Error::config(format!(
            "out has room for {} values, the dataset has {vars} variables",
            out.len()
        )));
    }
    if target as usize >= sess.ds.grid_count() {
        return Err(Error::config(format!(
            "target {target} out of range, the grid has {} nodes",
            sess.ds.grid_count()
        )));
    }
    let steps = sess.ds.steps() as u64;
    let min_t = sess.gcfg.window as u64 - 1;
    if t_end < min_t || t_end >= steps {
        return Err(Error::config(format!(
            "t_end {t_end} outside the valid range {min_t}..{steps} for an \
             input window of {}",
            sess.gcfg.window
        )));
    }

    let plan = WindowPlan {
        target,
        t_end: t_end as usize,
    };
    let window = materialize_window(&sess.ds, &sess.cache, &sess.gcfg, &plan, false);
    let mut tape = Tape::new();
    let leaves = ModelLeaves::register(&mut tape, &sess.ck.params);
    let fwd = cfg.forward_cfg(AdjacencyMode::HardST);
    let (pred, _) = predict_window(
        &mut tape,
        &leaves,
        &window,
        &fwd,
        &ZeroNoise,
        0,
        0,
        &OpCounters::default(),
    );
    let row = tape.value(pred);
    for (v, slot) in out.iter_mut().enumerate() {
        *slot = sess.ds.denormalize(v, row.get(0, v));
    }
    Ok(())
}

/// Forecasts the state of grid node `target` at step `t_end + 1` from the
/// window ending at `t_end`, writing one de-normalized value per variable
/// into `out` (length `out_len`, which must equal the session's variable
/// count). Deterministic: repeated calls return identical values.
///
/// # Safety
/// `sess` must be NULL or a live session handle; `out` must be NULL or
/// point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn asgn_session_forecast(
    sess: *const AsgnSession,
    target: u64,
    t_end: u64,
    out: *mut f64,
    out_len: usize,
) -> AsgnStatus {
    guarded(|| {
        let Some(sess) = sess.as_ref() else {
            set_error("session is NULL");
            return AsgnStatus::NullArgument;
        };
        if out.is_null() {
            set_error("out is NULL");
            return AsgnStatus::NullArgument;
        }
        let out = std::slice::from_raw_parts_mut(out, out_len);
        match forecast(sess, target, t_end, out) {
            Ok(()) => AsgnStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                error_status(&e)
            }
        }
    })
}
