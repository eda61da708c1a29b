//! C ABI over the cartoforge core.
//!
//! Every function returns a [`CfStatus`]; on failure the message is kept per
//! thread and readable through [`cf_last_error_message`]. Strings handed out
//! by the library must be released with [`cf_string_free`], handles with
//! their matching `_free` function. Panics never cross the boundary; they
//! come back as `CF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use cartoforge::corpus::{Example, Label};
use cartoforge::dynamics::{compute_data_map, estimated_max_variability, population_std, DynamicsError, EpochPredictionLog};
use cartoforge::filtering::normalize_for_compare;
use cartoforge::review::{cohens_kappa, AnnotationRecord};
use cartoforge::service::{ReviewStore, ServiceError, StoreConfig, SystemClock};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    NotFound = 5,
    Conflict = 6,
    Panic = 7,
}

/// Review store handle.
pub struct CfReviewStore {
    store: ReviewStore,
}

/// Per-epoch prediction log handle.
pub struct CfPredictionLog {
    log: EpochPredictionLog,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (CfStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            CfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (CfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl std::fmt::Display) -> Failure {
    (CfStatus::InvalidArgument, msg.to_string())
}

unsafe fn arg_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

fn into_c(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("string contains NUL"))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn service_failure(e: ServiceError) -> Failure {
    let status = match &e {
        ServiceError::UnknownTask(_) | ServiceError::NotAssigned { .. } => CfStatus::NotFound,
        ServiceError::Duplicate { .. } | ServiceError::ImportConflict(_) => CfStatus::Conflict,
        ServiceError::Io(_) => CfStatus::Io,
        ServiceError::Json(_) | ServiceError::CorruptJournal { .. } => CfStatus::Parse,
        _ => CfStatus::InvalidArgument,
    };
    (status, e.to_string())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed yet. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn cf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Max over label columns of the population std across epochs. `probs` is
/// row-major, `epochs` rows of `labels` values, each row summing to 1.
///
/// # Safety
/// `probs` must point to `epochs * labels` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_estimated_max_variability(
    probs: *const f64,
    epochs: usize,
    labels: usize,
    out: *mut f64,
) -> CfStatus {
    guard(|| {
        if probs.is_null() {
            return Err(null("probs"));
        }
        let out = out_arg(out, "out")?;
        let len = epochs.checked_mul(labels).ok_or_else(|| invalid("size overflow"))?;
        let flat = std::slice::from_raw_parts(probs, len);
        let rows: Vec<Vec<f64>> = flat.chunks(labels.max(1)).map(<[f64]>::to_vec).collect();
        *out = estimated_max_variability(&rows).map_err(invalid)?;
        Ok(())
    })
}

/// # Safety
/// `values` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_population_std(values: *const f64, n: usize, out: *mut f64) -> CfStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        if n == 0 {
            return Err(invalid("no values"));
        }
        *out_arg(out, "out")? = population_std(std::slice::from_raw_parts(values, n));
        Ok(())
    })
}

/// Cohen's kappa over `n` label pairs given as label indices
/// (0 entailment, 1 neutral, 2 contradiction).
///
/// # Safety
/// `first` and `second` must point to `n` bytes each; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_cohens_kappa(first: *const u8, second: *const u8, n: usize, out: *mut f64) -> CfStatus {
    guard(|| {
        if first.is_null() || second.is_null() {
            return Err(null("labels"));
        }
        let label = |i: u8| Label::from_index(i as usize).ok_or_else(|| invalid(format!("label index {i} out of range")));
        let a = std::slice::from_raw_parts(first, n);
        let b = std::slice::from_raw_parts(second, n);
        let pairs = a
            .iter()
            .zip(b)
            .map(|(x, y)| Ok((label(*x)?, label(*y)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        *out_arg(out, "out")? = cohens_kappa(&pairs).map_err(invalid)?;
        Ok(())
    })
}

/// Lowercased, punctuation-free, whitespace-collapsed copy of `text`.
/// Free the result with `cf_string_free`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_normalize_for_compare(text: *const c_char, out: *mut *mut c_char) -> CfStatus {
    guard(|| {
        let t = arg_str(text, "text")?;
        let out = out_arg(out, "out")?;
        *out = into_c(normalize_for_compare(t))?;
        Ok(())
    })
}

/// Reads a prediction log file (JSONL: a header line, then one line per example).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_prediction_log_read(path: *const c_char, out: *mut *mut CfPredictionLog) -> CfStatus {
    guard(|| {
        let p = arg_str(path, "path")?;
        let out = out_arg(out, "out")?;
        let log = EpochPredictionLog::read(Path::new(p)).map_err(|e| {
            let status = if matches!(e, DynamicsError::Io { .. }) { CfStatus::Io } else { CfStatus::Parse };
            (status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(CfPredictionLog { log }));
        Ok(())
    })
}

/// Number of examples in the log; 0 for NULL.
///
/// # Safety
/// `log` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_prediction_log_len(log: *const CfPredictionLog) -> usize {
    log.as_ref().map_or(0, |l| l.log.len())
}

/// Data map of the log as a JSON array. Free the result with `cf_string_free`.
///
/// # Safety
/// `log` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_prediction_log_data_map_json(log: *const CfPredictionLog, out: *mut *mut c_char) -> CfStatus {
    guard(|| {
        let log = log.as_ref().ok_or_else(|| null("log"))?;
        let out = out_arg(out, "out")?;
        let points = compute_data_map(&log.log).map_err(invalid)?;
        *out = into_c(serde_json::to_string(&points).map_err(invalid)?)?;
        Ok(())
    })
}

/// # Safety
/// `log` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cf_prediction_log_free(log: *mut CfPredictionLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}

/// Opens a review store persisted under `dir`, or an in-memory one when
/// `dir` is NULL. `lease_ms` of 0 selects the 30 minute default.
///
/// # Safety
/// `dir` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_review_store_open(dir: *const c_char, lease_ms: u64, out: *mut *mut CfReviewStore) -> CfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut cfg = StoreConfig::default();
        if lease_ms > 0 {
            cfg.lease_ms = lease_ms;
        }
        let clock = Arc::new(SystemClock);
        let store = if dir.is_null() {
            ReviewStore::in_memory(clock, cfg)
        } else {
            ReviewStore::open(Path::new(arg_str(dir, "dir")?), clock, cfg).map_err(service_failure)?
        };
        *out = Box::into_raw(Box::new(CfReviewStore { store }));
        Ok(())
    })
}

/// # Safety
/// `store` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cf_review_store_free(store: *mut CfReviewStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Imports examples given as JSONL (one example object per line).
///
/// # Safety
/// `store` must be a live handle, `jsonl` a NUL-terminated string, and
/// `imported` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn cf_review_store_import_jsonl(
    store: *const CfReviewStore,
    jsonl: *const c_char,
    imported: *mut usize,
) -> CfStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        let examples = arg_str(jsonl, "jsonl")?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<Example>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| (CfStatus::Parse, e.to_string()))?;
        let report = s.store.import_tasks(&examples).map_err(service_failure)?;
        if let Some(n) = imported.as_mut() {
            *n = report.imported;
        }
        Ok(())
    })
}

/// Assigns the next task to `worker` and writes it as JSON to `out`, or
/// writes NULL when nothing is available.
///
/// # Safety
/// `store` must be a live handle, `worker` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_review_store_next_task(
    store: *const CfReviewStore,
    worker: *const c_char,
    out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        let w = arg_str(worker, "worker")?;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if let Some(task) = s.store.next_task(w).map_err(service_failure)? {
            *out = into_c(serde_json::to_string(&task).map_err(invalid)?)?;
        }
        Ok(())
    })
}

/// Submits one annotation record given as JSON.
///
/// # Safety
/// `store` must be a live handle and `record_json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cf_review_store_submit(store: *const CfReviewStore, record_json: *const c_char) -> CfStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        let rec: AnnotationRecord =
            serde_json::from_str(arg_str(record_json, "record_json")?).map_err(|e| (CfStatus::Parse, e.to_string()))?;
        s.store.submit_annotation(rec).map_err(service_failure)
    })
}

/// Records of completed tasks as JSONL. Free the result with `cf_string_free`.
///
/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_review_store_export_jsonl(store: *const CfReviewStore, out: *mut *mut c_char) -> CfStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        let out = out_arg(out, "out")?;
        *out = into_c(s.store.export_jsonl())?;
        Ok(())
    })
}
