//! C ABI over `sws_mil`.
//!
//! Every fallible call returns an [`SwsStatus`]; on failure the message is
//! available from [`sws_last_error`] on the same thread. Handles are opaque
//! and owned by the caller until passed to the matching `*_free` function.
//! Strings returned through `char **` out-parameters must be released with
//! [`sws_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::{c_char, size_t};
use sws_mil::bagcore::{load_feature_store, max_priority_label, save_feature_store};
use sws_mil::milmodel::{load_checkpoint, save_checkpoint};
use sws_mil::{synthgen, trainer, Dataset, Error, MilParams, Split, TrainConfig};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Format = 3,
    Integrity = 4,
    Data = 5,
    Domain = 6,
    Dimension = 7,
    Numeric = 8,
    Contract = 9,
    Split = 10,
    Recycle = 11,
    Config = 12,
    Oracle = 13,
    Io = 14,
    BufferTooSmall = 15,
    Panic = 16,
}

impl From<&Error> for SwsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Format(_) => SwsStatus::Format,
            Error::Integrity(_) => SwsStatus::Integrity,
            Error::Data(_) => SwsStatus::Data,
            Error::Domain(_) => SwsStatus::Domain,
            Error::Dimension(_) => SwsStatus::Dimension,
            Error::Numeric(_) => SwsStatus::Numeric,
            Error::Contract(_) => SwsStatus::Contract,
            Error::Split(_) => SwsStatus::Split,
            Error::Recycle(_) => SwsStatus::Recycle,
            Error::Config(_) => SwsStatus::Config,
            Error::Oracle(_) => SwsStatus::Oracle,
            Error::Io { .. } => SwsStatus::Io,
        }
    }
}

/// Opaque dataset handle.
pub struct SwsDataset {
    inner: Dataset,
}

/// Opaque model handle: parameters plus the seed and round stored with them.
pub struct SwsModel {
    params: MilParams,
    seed: u64,
    round: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(text).ok());
}

struct Failure(SwsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SwsStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SwsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SwsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            SwsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SwsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SwsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

fn to_json(value: &impl serde::Serialize) -> Result<String, Failure> {
    serde_json::to_string(value).map_err(|e| Failure(SwsStatus::Format, e.to_string()))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sws_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sws_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a feature store directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sws_dataset_load(dir: *const c_char, out: *mut *mut SwsDataset) -> SwsStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_feature_store(&dir)?;
        write_out(out, Box::into_raw(Box::new(SwsDataset { inner })), "out")
    })
}

/// Generates the built-in binary benchmark with the given seed.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sws_dataset_synth_default(seed: u64, out: *mut *mut SwsDataset) -> SwsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = synthgen::SynthSpec {
            seed,
            ..synthgen::default_benchmark()
        };
        let inner = synthgen::generate(&spec)?;
        write_out(out, Box::into_raw(Box::new(SwsDataset { inner })), "out")
    })
}

/// Writes a dataset as a feature store directory.
///
/// # Safety
/// `ds` must be a live dataset handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sws_dataset_save(ds: *const SwsDataset, dir: *const c_char) -> SwsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        Ok(save_feature_store(&ds.inner, &dir)?)
    })
}

/// Number of bags; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sws_dataset_len(ds: *const SwsDataset) -> size_t {
    ds.as_ref().map_or(0, |d| d.inner.bags().len())
}

/// Feature dimension; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sws_dataset_dim(ds: *const SwsDataset) -> size_t {
    ds.as_ref().map_or(0, |d| d.inner.dim())
}

/// Number of classes; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sws_dataset_num_classes(ds: *const SwsDataset) -> size_t {
    ds.as_ref().map_or(0, |d| d.inner.num_classes())
}

/// # Safety
/// `ds` must be NULL or a handle from this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sws_dataset_free(ds: *mut SwsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Higher-priority of two class indices under the dataset's priority.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sws_max_priority_label(
    ds: *const SwsDataset,
    a: size_t,
    b: size_t,
    out: *mut size_t,
) -> SwsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let label = max_priority_label(a, b, ds.inner.priority())?;
        write_out(out, label, "out")
    })
}

/// Trains on the dataset. `config_json` is a JSON object of config keys or
/// NULL for defaults. On success `out_model` receives the best-round model
/// and `out_report` (if non-NULL) the report as JSON.
///
/// # Safety
/// Pointers must be valid; `config_json` NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sws_train(
    ds: *const SwsDataset,
    config_json: *const c_char,
    out_model: *mut *mut SwsModel,
    out_report: *mut *mut c_char,
) -> SwsStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(SwsStatus::Config, e.to_string()))?
        };
        let outcome = trainer::train(&ds.inner, &cfg)?;
        if !out_report.is_null() {
            out_report.write(into_c_string(to_json(&outcome.report)?));
        }
        let model = SwsModel {
            params: outcome.best,
            seed: cfg.seed,
            round: outcome.report.best_round,
        };
        write_out(out_model, Box::into_raw(Box::new(model)), "out_model")
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sws_model_load(path: *const c_char, out: *mut *mut SwsModel) -> SwsStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let (header, params) = load_checkpoint(&path)?;
        let model = SwsModel {
            params,
            seed: header.seed,
            round: header.round,
        };
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sws_model_save(model: *const SwsModel, path: *const c_char) -> SwsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(save_checkpoint(&path, &model.params, model.seed, model.round)?)
    })
}

/// Feature dimension the model expects; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sws_model_dim(model: *const SwsModel) -> size_t {
    model.as_ref().map_or(0, |m| m.params.dim())
}

/// Number of classes; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sws_model_num_classes(model: *const SwsModel) -> size_t {
    model.as_ref().map_or(0, |m| m.params.num_classes())
}

/// Predicts one bag of `n` row-major instances of dimension `d`.
///
/// `probs` receives `probs_len` (≥ number of classes) probabilities;
/// `attention`, if non-NULL, receives `n` weights; `label` the argmax class.
///
/// # Safety
/// `features` must hold `n * d` floats; output buffers must have the sizes
/// stated above.
#[no_mangle]
pub unsafe extern "C" fn sws_model_predict(
    model: *const SwsModel,
    features: *const f32,
    n: size_t,
    d: size_t,
    probs: *mut f64,
    probs_len: size_t,
    attention: *mut f64,
    label: *mut size_t,
) -> SwsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        if features.is_null() {
            return Err(null("features"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        let c = model.params.num_classes();
        if probs_len < c {
            return Err(Failure(
                SwsStatus::BufferTooSmall,
                format!("probs holds {probs_len} values, model has {c} classes"),
            ));
        }
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Failure(SwsStatus::Dimension, "n * d overflows".into()))?;
        let raw = std::slice::from_raw_parts(features, len);
        let x = sws_mil::tensor::Matrix::new(n, d, raw.iter().map(|v| f64::from(*v)).collect())?;
        let pred = model.params.forward(&x)?;
        ptr::copy_nonoverlapping(pred.probs.as_ptr(), probs, c);
        if !attention.is_null() {
            ptr::copy_nonoverlapping(pred.attention.as_ptr(), attention, n);
        }
        if !label.is_null() {
            label.write(pred.label);
        }
        Ok(())
    })
}

/// Evaluates on `split` ("train", "val" or "test"); `out_json` receives the
/// evaluation (metrics and per-bag predictions).
///
/// # Safety
/// Handles must be live; `split` NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn sws_evaluate(
    model: *const SwsModel,
    ds: *const SwsDataset,
    split: *const c_char,
    out_json: *mut *mut c_char,
) -> SwsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "dataset")?;
        let split: Split = str_arg(split, "split")?.parse()?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let evaluation = trainer::evaluate(&model.params, &ds.inner, split)?;
        write_out(out_json, into_c_string(to_json(&evaluation)?), "out_json")
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library that was not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sws_model_free(model: *mut SwsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
