//! C ABI for the vtlab core library.
//!
//! Handles are opaque pointers; every fallible call returns a status code
//! and stores a human-readable message retrievable with
//! [`vtlab_last_error`]. Strings returned by `*_json` functions are owned
//! by the caller and must be released with [`vtlab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use vtlab_core::checkpoint;
use vtlab_core::engine::{bench, generate, Scenario};
use vtlab_core::error::Error;
use vtlab_core::model::{ModelConfig, ModelInput, SyntheticImage, VlmModel};
use vtlab_core::tensor::Tensor;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VtlabStatus {
    Ok = 0,
    /// A pointer or size argument was null/invalid.
    InvalidArgument = 1,
    /// The configuration was rejected.
    ConfigError = 2,
    /// The operation failed at runtime.
    RuntimeError = 3,
}

/// Opaque model handle.
pub struct VtlabModel {
    inner: VlmModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> VtlabStatus {
    match err.exit_code() {
        2 => VtlabStatus::ConfigError,
        _ => VtlabStatus::RuntimeError,
    }
}

fn fail(err: Error) -> VtlabStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn invalid(msg: &str) -> VtlabStatus {
    set_error(msg);
    VtlabStatus::InvalidArgument
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

fn to_owned_cstring(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn vtlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message into `buf` (truncated to `cap` bytes,
/// always NUL-terminated). Returns the full message length.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null.
#[no_mangle]
pub unsafe extern "C" fn vtlab_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Build a fresh seeded model from a JSON model configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated UTF-8 string; `out` must be a
/// valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn vtlab_model_new(
    config_json: *const c_char,
    out: *mut *mut VtlabModel,
) -> VtlabStatus {
    if out.is_null() {
        return invalid("out handle pointer is null");
    }
    let Some(text) = cstr_arg(config_json) else {
        return invalid("config_json is null or not UTF-8");
    };
    let config: ModelConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => return fail(Error::Config(format!("invalid model config: {e}"))),
    };
    match VlmModel::new(config) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(VtlabModel { inner }));
            VtlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vtlab_model_load(
    path: *const c_char,
    out: *mut *mut VtlabModel,
) -> VtlabStatus {
    if out.is_null() {
        return invalid("out handle pointer is null");
    }
    let Some(path) = cstr_arg(path) else {
        return invalid("path is null or not UTF-8");
    };
    match checkpoint::load(Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(VtlabModel { inner }));
            VtlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Write the model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle from this library; `path` a
/// NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn vtlab_model_save(
    model: *const VtlabModel,
    path: *const c_char,
) -> VtlabStatus {
    let Some(model) = model.as_ref() else {
        return invalid("model handle is null");
    };
    let Some(path) = cstr_arg(path) else {
        return invalid("path is null or not UTF-8");
    };
    match checkpoint::save(&model.inner, Path::new(path)) {
        Ok(()) => VtlabStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vtlab_model_free(model: *mut VtlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total scalar parameter count of the model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vtlab_model_param_count(model: *const VtlabModel) -> u64 {
    model
        .as_ref()
        .map(|m| m.inner.params.total_params())
        .unwrap_or(0)
}

/// Greedy-generate `n_tokens` tokens for one image + text prompt.
///
/// `patches` is row-major `[n_patches, patch_dim]` and must match the
/// model's grid; `text_ids`/`text_len` give the prompt tokens. Exactly
/// `n_tokens` ids are written to `out_tokens`.
///
/// # Safety
/// All pointers must reference buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn vtlab_generate(
    model: *const VtlabModel,
    patches: *const f64,
    n_patches: usize,
    patch_dim: usize,
    text_ids: *const u32,
    text_len: usize,
    n_tokens: usize,
    out_tokens: *mut u32,
) -> VtlabStatus {
    let Some(model) = model.as_ref() else {
        return invalid("model handle is null");
    };
    if patches.is_null() || text_ids.is_null() || out_tokens.is_null() {
        return invalid("patches, text_ids and out_tokens must be non-null");
    }
    let config = &model.inner.config;
    if n_patches != config.n_visual() || patch_dim != config.patch_dim {
        return fail(Error::Config(format!(
            "expected {} patches of dim {}, got {n_patches} of {patch_dim}",
            config.n_visual(),
            config.patch_dim
        )));
    }
    let patch_data = std::slice::from_raw_parts(patches, n_patches * patch_dim).to_vec();
    let tensor = match Tensor::new(vec![n_patches, patch_dim], patch_data) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let text: Vec<usize> = std::slice::from_raw_parts(text_ids, text_len)
        .iter()
        .map(|&t| t as usize)
        .collect();
    let input = ModelInput {
        image: SyntheticImage {
            grid: config.grid,
            patches: tensor,
            labels: vec![0; n_patches],
        },
        text_ids: text,
    };
    match generate(&model.inner, &input, n_tokens) {
        Ok(tokens) => {
            for (i, t) in tokens.iter().enumerate() {
                *out_tokens.add(i) = *t as u32;
            }
            VtlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Run the throughput benchmark for a JSON scenario; on success `out_json`
/// receives a serialized report (free with [`vtlab_string_free`]).
///
/// # Safety
/// `model` must be live; `scenario_json` NUL-terminated UTF-8; `out_json`
/// a valid slot.
#[no_mangle]
pub unsafe extern "C" fn vtlab_bench_json(
    model: *const VtlabModel,
    scenario_json: *const c_char,
    workers: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> VtlabStatus {
    let Some(model) = model.as_ref() else {
        return invalid("model handle is null");
    };
    if out_json.is_null() {
        return invalid("out_json is null");
    }
    let Some(text) = cstr_arg(scenario_json) else {
        return invalid("scenario_json is null or not UTF-8");
    };
    let scenario: Scenario = match serde_json::from_str(text) {
        Ok(s) => s,
        Err(e) => return fail(Error::Config(format!("invalid scenario: {e}"))),
    };
    match bench(&model.inner, &scenario, workers.max(1), seed) {
        Ok(report) => match serde_json::to_string(&report) {
            Ok(json) => {
                *out_json = to_owned_cstring(json);
                VtlabStatus::Ok
            }
            Err(e) => fail(Error::Json(e)),
        },
        Err(e) => fail(e),
    }
}

/// Analytic prefill FLOPs for a JSON model config at `n_text` prompt
/// tokens; `out_json` receives the report.
///
/// # Safety
/// `config_json` must be NUL-terminated UTF-8; `out_json` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn vtlab_flops_json(
    config_json: *const c_char,
    n_text: usize,
    out_json: *mut *mut c_char,
) -> VtlabStatus {
    if out_json.is_null() {
        return invalid("out_json is null");
    }
    let Some(text) = cstr_arg(config_json) else {
        return invalid("config_json is null or not UTF-8");
    };
    let config: ModelConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => return fail(Error::Config(format!("invalid model config: {e}"))),
    };
    match vtlab_core::analytics::model_flops(&config, n_text) {
        Ok(report) => match serde_json::to_string(&report) {
            Ok(json) => {
                *out_json = to_owned_cstring(json);
                VtlabStatus::Ok
            }
            Err(e) => fail(Error::Json(e)),
        },
        Err(e) => fail(e),
    }
}

/// Free a string returned by a `*_json` function. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn vtlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
