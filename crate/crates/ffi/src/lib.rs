//! C ABI over the `fedtier` library.
//!
//! Handles (`FtParams`, `FtDataset`, `FtMetrics`) are opaque heap objects
//! owned by the caller and released with their `*_free` function. Every
//! fallible call returns an [`FtStatus`]; on failure a message is available
//! from [`ft_last_error`] on the same thread. Panics never cross the boundary.
//!
//! Strings returned by the library are NUL-terminated and must be released
//! with [`ft_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedtier::codec::{decode_params, encode_params, encoded_len};
use fedtier::mnist::{load_mnist_dir, synthetic, LabeledSet};
use fedtier::nn::{evaluate_accuracy, CnnArch, NUM_CLASSES};
use fedtier::protocol::{profile_similarity, DataProfile};
use fedtier::report::{metrics_csv, metrics_json};
use fedtier::sim::{run_experiment, ExperimentConfig, RoundMetrics, SimError};
use fedtier::{fedavg, ModelParams};

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Codec = 3,
    Config = 4,
    Data = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Parameters of the reference CNN.
pub struct FtParams(ModelParams);

/// A labeled image set (normalized pixels).
pub struct FtDataset(LabeledSet);

/// Per-round metrics of a finished experiment.
pub struct FtMetrics(Vec<RoundMetrics>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(FtStatus, String);

impl Fail {
    fn new(status: FtStatus, msg: impl Into<String>) -> Self {
        Fail(status, msg.into())
    }
}

impl From<SimError> for Fail {
    fn from(e: SimError) -> Self {
        let status = match e {
            SimError::Config(_) => FtStatus::Config,
            SimError::Data(_) => FtStatus::Data,
            _ => FtStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FtStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail::new(FtStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::new(FtStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(FtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(FtStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ft_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Seeded initial parameters of the reference CNN.
///
/// # Safety
/// `out` must be a valid pointer to write a handle to.
#[no_mangle]
pub unsafe extern "C" fn ft_params_init(seed: u64, out: *mut *mut FtParams) -> FtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let params = CnnArch::simple_cnn().init_params(seed);
        *out = Box::into_raw(Box::new(FtParams(params)));
        Ok(())
    })
}

/// Releases a parameter handle. Null is ignored.
///
/// # Safety
/// `params` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ft_params_free(params: *mut FtParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Number of scalar values held by `params`, or 0 for null.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ft_params_value_count(params: *const FtParams) -> usize {
    params.as_ref().map_or(0, |p| p.0.num_values())
}

/// Size in bytes of the wire encoding of `params`, or 0 for null.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ft_params_encoded_len(params: *const FtParams) -> usize {
    params.as_ref().map_or(0, |p| encoded_len(&p.0))
}

/// Writes the wire encoding into `buf`. `written` receives the encoded size
/// even when `cap` is too small (status `BUFFER_TOO_SMALL`).
///
/// # Safety
/// `buf` must point to `cap` writable bytes; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_params_encode(
    params: *const FtParams,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> FtStatus {
    guard(|| {
        let params = deref(params, "params")?;
        out_ptr(written, "written")?;
        let bytes = encode_params(&params.0);
        *written = bytes.len();
        if bytes.len() > cap {
            return Err(Fail::new(
                FtStatus::BufferTooSmall,
                format!("need {} bytes, buffer holds {cap}", bytes.len()),
            ));
        }
        out_ptr(buf, "buf")?;
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// Decodes reference-CNN parameters from their wire encoding.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_params_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut FtParams,
) -> FtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if bytes.is_null() {
            return Err(Fail::new(FtStatus::NullPointer, "bytes is null"));
        }
        let slice = std::slice::from_raw_parts(bytes, len);
        let params = decode_params(slice, &CnnArch::simple_cnn())
            .map_err(|e| Fail::new(FtStatus::Codec, e.to_string()))?;
        *out = Box::into_raw(Box::new(FtParams(params)));
        Ok(())
    })
}

/// Weighted average of `n` parameter sets. Weights must be positive.
///
/// # Safety
/// `params` and `weights` must each point to `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_params_fedavg(
    params: *const *const FtParams,
    weights: *const f64,
    n: usize,
    out: *mut *mut FtParams,
) -> FtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if params.is_null() || weights.is_null() {
            return Err(Fail::new(
                FtStatus::NullPointer,
                "params or weights is null",
            ));
        }
        let handles = std::slice::from_raw_parts(params, n);
        let weights = std::slice::from_raw_parts(weights, n);
        let mut updates = Vec::with_capacity(n);
        for (i, (&h, &w)) in handles.iter().zip(weights).enumerate() {
            updates.push((&deref(h, &format!("params[{i}]"))?.0, w));
        }
        let avg =
            fedavg(&updates).map_err(|e| Fail::new(FtStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(FtParams(avg)));
        Ok(())
    })
}

/// Accuracy of `params` on `data`, in [0, 1].
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_params_evaluate(
    params: *const FtParams,
    data: *const FtDataset,
    out: *mut f64,
) -> FtStatus {
    guard(|| {
        let params = deref(params, "params")?;
        let data = deref(data, "data")?;
        out_ptr(out, "out")?;
        *out = evaluate_accuracy(&CnnArch::simple_cnn(), &params.0, &data.0)
            .map_err(|e| Fail::new(FtStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Cosine similarity in [0, 1] of two 10-bin label histograms.
///
/// # Safety
/// `hist_a` and `hist_b` must each point to 10 doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_profile_similarity(
    hist_a: *const f64,
    hist_b: *const f64,
    out: *mut f64,
) -> FtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if hist_a.is_null() || hist_b.is_null() {
            return Err(Fail::new(FtStatus::NullPointer, "histogram is null"));
        }
        let profile = |p: *const f64| -> Result<DataProfile, Fail> {
            let mut h = [0.0; NUM_CLASSES];
            h.copy_from_slice(std::slice::from_raw_parts(p, NUM_CLASSES));
            DataProfile::new(h, 1).map_err(|e| Fail::new(FtStatus::InvalidArgument, e.to_string()))
        };
        *out = profile_similarity(&profile(hist_a)?, &profile(hist_b)?)
            .map_err(|e| Fail::new(FtStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Loads the four MNIST IDX files from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `train` and `test` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_dataset_load_mnist(
    dir: *const c_char,
    train: *mut *mut FtDataset,
    test: *mut *mut FtDataset,
) -> FtStatus {
    guard(|| {
        let dir = c_str(dir, "dir")?;
        out_ptr(train, "train")?;
        out_ptr(test, "test")?;
        let (tr, te) =
            load_mnist_dir(Path::new(dir)).map_err(|e| Fail::new(FtStatus::Data, e.to_string()))?;
        *train = Box::into_raw(Box::new(FtDataset(tr)));
        *test = Box::into_raw(Box::new(FtDataset(te)));
        Ok(())
    })
}

/// Seeded synthetic digit-like images; labels cycle through 0..9.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_dataset_synthetic(
    n: usize,
    seed: u64,
    out: *mut *mut FtDataset,
) -> FtStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(FtDataset(synthetic(n, seed))));
        Ok(())
    })
}

/// Number of images in `data`, or 0 for null.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ft_dataset_len(data: *const FtDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `data` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ft_dataset_free(data: *mut FtDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Runs the experiment described by `config_json` on the given data.
///
/// # Safety
/// `config_json` must be NUL-terminated; handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ft_run_experiment(
    config_json: *const c_char,
    train: *const FtDataset,
    test: *const FtDataset,
    out: *mut *mut FtMetrics,
) -> FtStatus {
    guard(|| {
        let text = c_str(config_json, "config_json")?;
        let train = deref(train, "train")?;
        let test = deref(test, "test")?;
        out_ptr(out, "out")?;
        let cfg = ExperimentConfig::from_json(text)?;
        let output = run_experiment(&cfg, &train.0, &test.0)?;
        *out = Box::into_raw(Box::new(FtMetrics(output.metrics)));
        Ok(())
    })
}

/// Number of recorded rounds, or 0 for null.
///
/// # Safety
/// `metrics` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ft_metrics_round_count(metrics: *const FtMetrics) -> usize {
    metrics.as_ref().map_or(0, |m| m.0.len())
}

/// Accuracy of `client_id` after round `round` (1-based).
///
/// # Safety
/// `metrics` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_metrics_accuracy(
    metrics: *const FtMetrics,
    round: u64,
    client_id: u64,
    out: *mut f64,
) -> FtStatus {
    guard(|| {
        let metrics = deref(metrics, "metrics")?;
        out_ptr(out, "out")?;
        let acc = metrics
            .0
            .iter()
            .find(|m| m.round == round)
            .and_then(|m| m.per_client.iter().find(|c| c.client_id == client_id))
            .ok_or_else(|| {
                Fail::new(
                    FtStatus::InvalidArgument,
                    format!("no accuracy for client {client_id} in round {round}"),
                )
            })?;
        *out = acc.accuracy;
        Ok(())
    })
}

/// Metrics as CSV text. Free with [`ft_string_free`].
///
/// # Safety
/// `metrics` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_metrics_to_csv(
    metrics: *const FtMetrics,
    out: *mut *mut c_char,
) -> FtStatus {
    guard(|| {
        let metrics = deref(metrics, "metrics")?;
        out_ptr(out, "out")?;
        let text =
            metrics_csv(&metrics.0).map_err(|e| Fail::new(FtStatus::Runtime, e.to_string()))?;
        *out = into_c_string(text);
        Ok(())
    })
}

/// Metrics as JSON text. Free with [`ft_string_free`].
///
/// # Safety
/// `metrics` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_metrics_to_json(
    metrics: *const FtMetrics,
    out: *mut *mut c_char,
) -> FtStatus {
    guard(|| {
        let metrics = deref(metrics, "metrics")?;
        out_ptr(out, "out")?;
        let text =
            metrics_json(&metrics.0).map_err(|e| Fail::new(FtStatus::Runtime, e.to_string()))?;
        *out = into_c_string(text);
        Ok(())
    })
}

/// Releases a metrics handle. Null is ignored.
///
/// # Safety
/// `metrics` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ft_metrics_free(metrics: *mut FtMetrics) {
    if !metrics.is_null() {
        drop(Box::from_raw(metrics));
    }
}
