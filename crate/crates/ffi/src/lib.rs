//! C ABI over the trajectory prediction library.
//!
//! Handles are opaque pointers owned by the library; every constructor has a
//! matching `_free`. Functions return an [`LfStatus`] code and never unwind
//! across the boundary; the last failure message is kept per thread and can
//! be copied out with [`lf_last_error`]. All operations are deterministic
//! for fixed inputs.

use latentformer::checkpoint;
use latentformer::error::Error;
use latentformer::metrics;
use latentformer::model::Model;
use latentformer::scene::SceneSet;
use std::cell::RefCell;
use std::ffi::CStr;
use std::os::raw::{c_char, c_double};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

// ─── status codes and error reporting ───────────────────────────────────────

/// Result class of an API call. Numeric values are stable and mirror the
/// command-line exit codes for the shared classes (3..=6).
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LfStatus {
    LfOk = 0,
    LfNullArgument = 1,
    LfInvalidUtf8 = 2,
    LfIo = 3,
    LfConfig = 4,
    LfData = 5,
    LfInternal = 6,
    LfBufferTooSmall = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: LfStatus, message: impl Into<String>) -> LfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn fail_with(err: &Error) -> LfStatus {
    let status = match err {
        Error::Io(_) => LfStatus::LfIo,
        Error::Config(_) => LfStatus::LfConfig,
        Error::Format(_) | Error::Dimension(_) | Error::Capacity(_) => LfStatus::LfData,
        _ => LfStatus::LfInternal,
    };
    fail(status, err.to_string())
}

fn ok() -> LfStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    LfStatus::LfOk
}

/// Run a body with panics converted to `LfInternal`.
fn guarded(body: impl FnOnce() -> LfStatus) -> LfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(LfStatus::LfInternal, format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn utf8_path<'a>(ptr: *const c_char) -> Result<&'a Path, LfStatus> {
    if ptr.is_null() {
        return Err(fail(LfStatus::LfNullArgument, "path pointer is null"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(e) => Err(fail(LfStatus::LfInvalidUtf8, format!("path is not UTF-8: {e}"))),
    }
}

// ─── opaque handles ─────────────────────────────────────────────────────────

/// Loaded model plus its checkpoint configuration.
pub struct LfModel {
    inner: Model,
}

/// Parsed scene-set file.
pub struct LfSceneSet {
    inner: SceneSet,
}

// ─── metrics struct ─────────────────────────────────────────────────────────

/// Aggregate displacement errors over an evaluation run. `min_*` take the
/// best of the K samples per agent, `avg_*` the mean, both averaged over
/// all agents of all scenes. An exact minimum of zero means every scene
/// had a perfect sample.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LfMetrics {
    pub min_ade: c_double,
    pub avg_ade: c_double,
    pub min_fde: c_double,
    pub avg_fde: c_double,
}

// ─── lifecycle ──────────────────────────────────────────────────────────────

/// Load a model from a checkpoint directory into `*out`.
///
/// # Safety
/// `checkpoint_dir` must be null or NUL-terminated; `out` must be a valid
/// pointer to pointer storage.
#[no_mangle]
pub unsafe extern "C" fn lf_model_load(
    checkpoint_dir: *const c_char,
    out: *mut *mut LfModel,
) -> LfStatus {
    guarded(|| {
        if out.is_null() {
            return fail(LfStatus::LfNullArgument, "out pointer is null");
        }
        let dir = match utf8_path(checkpoint_dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::load_model(dir) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(LfModel { inner: model }));
                ok()
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer obtained from [`lf_model_load`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn lf_model_free(model: *mut LfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Load a scene-set file into `*out`.
///
/// # Safety
/// `path` must be null or NUL-terminated; `out` must be valid storage.
#[no_mangle]
pub unsafe extern "C" fn lf_scene_set_load(
    path: *const c_char,
    out: *mut *mut LfSceneSet,
) -> LfStatus {
    guarded(|| {
        if out.is_null() {
            return fail(LfStatus::LfNullArgument, "out pointer is null");
        }
        let p = match utf8_path(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match SceneSet::load(p) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(LfSceneSet { inner: set }));
                ok()
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Release a scene-set handle. Null is a no-op.
///
/// # Safety
/// `set` must be null or an unfreed pointer from [`lf_scene_set_load`].
#[no_mangle]
pub unsafe extern "C" fn lf_scene_set_free(set: *mut LfSceneSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

// ─── introspection ──────────────────────────────────────────────────────────

/// Mode count and prediction horizon of a loaded model.
///
/// # Safety
/// All pointers must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lf_model_info(
    model: *const LfModel,
    k_modes: *mut usize,
    horizon: *mut usize,
) -> LfStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            return fail(LfStatus::LfNullArgument, "model handle is null");
        };
        if !k_modes.is_null() {
            *k_modes = m.inner.cfg.k_modes;
        }
        if !horizon.is_null() {
            *horizon = m.inner.cfg.horizon;
        }
        ok()
    })
}

/// Scene count, number of observed past steps, and horizon of a scene set.
///
/// # Safety
/// All pointers must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lf_scene_set_info(
    set: *const LfSceneSet,
    scenes: *mut usize,
    tau: *mut usize,
    horizon: *mut usize,
) -> LfStatus {
    guarded(|| {
        let Some(s) = set.as_ref() else {
            return fail(LfStatus::LfNullArgument, "scene set handle is null");
        };
        if !scenes.is_null() {
            *scenes = s.inner.scenes.len();
        }
        if !tau.is_null() {
            *tau = s.inner.tau;
        }
        if !horizon.is_null() {
            *horizon = s.inner.horizon;
        }
        ok()
    })
}

/// Agent count of one scene.
///
/// # Safety
/// `set` and `agents` must be null or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lf_scene_agent_count(
    set: *const LfSceneSet,
    scene_index: usize,
    agents: *mut usize,
) -> LfStatus {
    guarded(|| {
        let Some(s) = set.as_ref() else {
            return fail(LfStatus::LfNullArgument, "scene set handle is null");
        };
        let Some(scene) = s.inner.scenes.get(scene_index) else {
            return fail(
                LfStatus::LfData,
                format!("scene index {scene_index} outside 0..{}", s.inner.scenes.len()),
            );
        };
        if agents.is_null() {
            return fail(LfStatus::LfNullArgument, "agents pointer is null");
        }
        *agents = scene.agents.len();
        ok()
    })
}

// ─── inference ──────────────────────────────────────────────────────────────

/// K deterministic mode-conditioned rollouts for one scene.
///
/// `points` receives `k * agents * horizon * 2` doubles laid out sample-major,
/// then agent-major, then time, then x,y. `capacity` is the buffer length in
/// doubles. `*written` always receives the required length; when the buffer
/// is too small nothing is written and the call returns `LfBufferTooSmall`.
///
/// # Safety
/// `points` must be valid for `capacity` writes; other pointers null or valid.
#[no_mangle]
pub unsafe extern "C" fn lf_predict(
    model: *const LfModel,
    set: *const LfSceneSet,
    scene_index: usize,
    k: usize,
    points: *mut c_double,
    capacity: usize,
    written: *mut usize,
) -> LfStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            return fail(LfStatus::LfNullArgument, "model handle is null");
        };
        let Some(s) = set.as_ref() else {
            return fail(LfStatus::LfNullArgument, "scene set handle is null");
        };
        let Some(scene) = s.inner.scenes.get(scene_index) else {
            return fail(
                LfStatus::LfData,
                format!("scene index {scene_index} outside 0..{}", s.inner.scenes.len()),
            );
        };
        let samples = match m.inner.predict(scene, k) {
            Ok(v) => v,
            Err(e) => return fail_with(&e),
        };
        let needed: usize = samples.iter().map(|s| s.points.len()).sum();
        if !written.is_null() {
            *written = needed;
        }
        if capacity < needed {
            return fail(
                LfStatus::LfBufferTooSmall,
                format!("need {needed} doubles, buffer holds {capacity}"),
            );
        }
        if points.is_null() {
            return fail(LfStatus::LfNullArgument, "points pointer is null");
        }
        let mut offset = 0;
        for sample in &samples {
            std::ptr::copy_nonoverlapping(
                sample.points.as_ptr(),
                points.add(offset),
                sample.points.len(),
            );
            offset += sample.points.len();
        }
        ok()
    })
}

/// Score the model over every scene with K mean rollouts per scene.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lf_evaluate(
    model: *const LfModel,
    set: *const LfSceneSet,
    k: usize,
    out: *mut LfMetrics,
) -> LfStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            return fail(LfStatus::LfNullArgument, "model handle is null");
        };
        let Some(s) = set.as_ref() else {
            return fail(LfStatus::LfNullArgument, "scene set handle is null");
        };
        if out.is_null() {
            return fail(LfStatus::LfNullArgument, "out pointer is null");
        }
        match metrics::evaluate(&m.inner, &s.inner.scenes, k, false, 0) {
            Ok(rep) => {
                *out = LfMetrics {
                    min_ade: rep.min_ade,
                    avg_ade: rep.avg_ade,
                    min_fde: rep.min_fde,
                    avg_fde: rep.avg_fde,
                };
                ok()
            }
            Err(e) => fail_with(&e),
        }
    })
}

// ─── error text and version ─────────────────────────────────────────────────

/// Copy the calling thread's last error message into `buf`, always
/// NUL-terminated, truncating if needed. Returns the full message length in
/// bytes (excluding the NUL), so a return >= `capacity` means truncation.
/// With a null or zero-length buffer it just reports the length.
///
/// # Safety
/// `buf` must be valid for `capacity` writes, or null.
#[no_mangle]
pub unsafe extern "C" fn lf_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static library version string.
#[no_mangle]
pub extern "C" fn lf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
