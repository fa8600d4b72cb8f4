//! C interface. Objects cross the boundary as opaque handles that the caller
//! frees with the matching `*_free` function. Every fallible function returns
//! a [`DcssStatus`]; on failure `dcss_last_error_message` describes the error
//! raised on the calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dcss::config::ExperimentConfig;
use dcss::cost::LayerCostSpec;
use dcss::extract::derive_plan;
use dcss::model::{read_checkpoint, Network};
use dcss::pipeline::{run_pipeline, Report};
use dcss::verify::run_all;
use dcss::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcssStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    State = 7,
    Numeric = 8,
    Internal = 9,
    Panic = 10,
}

/// Experiment configuration.
pub struct DcssConfig(ExperimentConfig);

/// Result of a full pipeline run.
pub struct DcssReport(Report);

/// Network loaded from a checkpoint, in its stored precision.
pub enum DcssModel {
    F32(Network<f32>),
    F64(Network<f64>),
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DcssStatus {
    match e {
        Error::Config(_) | Error::Argument(_) => DcssStatus::Config,
        Error::Io(_) => DcssStatus::Io,
        Error::Format { .. } | Error::Json(_) => DcssStatus::Format,
        Error::Dimension(_) | Error::Geometry(_) | Error::Rank(_) | Error::Index(_) | Error::Structural { .. } => {
            DcssStatus::Shape
        }
        Error::State(_) | Error::UninitializedStats(_) | Error::EmptyDataset(_) => DcssStatus::State,
        Error::Domain(_) | Error::NonFinite(_) => DcssStatus::Numeric,
        Error::Invariant(_) => DcssStatus::Internal,
        Error::Stage { source, .. } => status_of(source),
    }
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (DcssStatus, String)>) -> DcssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DcssStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DcssStatus::Panic
        }
    }
}

fn lib(e: Error) -> (DcssStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (DcssStatus, String) {
    (DcssStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (DcssStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DcssStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

unsafe fn out_ptr<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread; do not free.
#[no_mangle]
pub extern "C" fn dcss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn dcss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn dcss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// FLOPs of one convolution: `kh * kw * in_channels * out_h * out_w * out_channels`.
#[no_mangle]
pub extern "C" fn dcss_conv_flops(kh: usize, kw: usize, in_channels: usize, out_h: usize, out_w: usize, out_channels: usize) -> u64 {
    LayerCostSpec {
        kernel_h: kh,
        kernel_w: kw,
        in_channels,
        out_h,
        out_w,
        full_out: out_channels,
    }
    .full_flops()
}

/// Configuration with every key at its default.
#[no_mangle]
pub unsafe extern "C" fn dcss_config_default(out: *mut *mut DcssConfig) -> DcssStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out_ptr(out, DcssConfig(ExperimentConfig::default()));
        Ok(())
    })
}

/// Parses a TOML configuration; unknown keys are errors.
#[no_mangle]
pub unsafe extern "C" fn dcss_config_from_toml(text: *const c_char, out: *mut *mut DcssConfig) -> DcssStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_ptr(out, DcssConfig(ExperimentConfig::from_toml(text).map_err(lib)?));
        Ok(())
    })
}

/// Reads a TOML configuration file.
#[no_mangle]
pub unsafe extern "C" fn dcss_config_load(path: *const c_char, out: *mut *mut DcssConfig) -> DcssStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_ptr(out, DcssConfig(ExperimentConfig::load(path.as_ref()).map_err(lib)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dcss_config_set_seed(cfg: *mut DcssConfig, seed: u64) -> DcssStatus {
    guard(|| {
        cfg.as_mut().ok_or_else(|| null("cfg"))?.0.seed = seed;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dcss_config_set_lambda(cfg: *mut DcssConfig, lambda: f64) -> DcssStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let mut next = cfg.0.clone();
        next.lambda = lambda;
        next.validate().map_err(lib)?;
        cfg.0 = next;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dcss_config_set_out_dir(cfg: *mut DcssConfig, dir: *const c_char) -> DcssStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        cfg.as_mut().ok_or_else(|| null("cfg"))?.0.out_dir = PathBuf::from(dir);
        Ok(())
    })
}

/// Hex SHA-256 of the configuration (output directory excluded). Free with
/// `dcss_string_free`.
#[no_mangle]
pub unsafe extern "C" fn dcss_config_hash(cfg: *const DcssConfig, out: *mut *mut c_char) -> DcssStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = owned_string(cfg.0.hash());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dcss_config_free(cfg: *mut DcssConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs warm-up, search, extraction, fine-tuning and the baselines, writing
/// every artifact to the configured output directory.
#[no_mangle]
pub unsafe extern "C" fn dcss_run_pipeline(cfg: *const DcssConfig, resume: bool, out: *mut *mut DcssReport) -> DcssStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = run_pipeline(cfg.0.clone(), resume).map_err(lib)?;
        out_ptr(out, DcssReport(report));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dcss_report_predicted_flops(report: *const DcssReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.predicted_flops)
}

#[no_mangle]
pub unsafe extern "C" fn dcss_report_true_flops(report: *const DcssReport) -> u64 {
    report.as_ref().map_or(0, |r| r.0.true_flops)
}

#[no_mangle]
pub unsafe extern "C" fn dcss_report_prune_ratio(report: *const DcssReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.prune_ratio)
}

/// Test accuracy of the slim model in percent; NaN for regression.
#[no_mangle]
pub unsafe extern "C" fn dcss_report_slim_accuracy(report: *const DcssReport) -> f64 {
    report
        .as_ref()
        .and_then(|r| r.0.slim.metrics.accuracy)
        .unwrap_or(f64::NAN)
}

/// The report as JSON. Free with `dcss_string_free`.
#[no_mangle]
pub unsafe extern "C" fn dcss_report_to_json(report: *const DcssReport, out: *mut *mut c_char) -> DcssStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = owned_string(serde_json::to_string_pretty(&r.0).map_err(|e| lib(e.into()))?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dcss_report_free(report: *mut DcssReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Loads a checkpoint written by the pipeline (either precision).
#[no_mangle]
pub unsafe extern "C" fn dcss_model_load(path: *const c_char, out: *mut *mut DcssModel) -> DcssStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::fs::read(path).map_err(|e| lib(e.into()))?;
        let model = match read_checkpoint::<f32>(&bytes) {
            Ok(c) => DcssModel::F32(c.network),
            Err(_) => DcssModel::F64(read_checkpoint::<f64>(&bytes).map_err(lib)?.network),
        };
        out_ptr(out, model);
        Ok(())
    })
}

/// Per-sample FLOPs of the network at its current widths.
#[no_mangle]
pub unsafe extern "C" fn dcss_model_true_flops(model: *const DcssModel) -> u64 {
    match model.as_ref() {
        Some(DcssModel::F32(n)) => n.true_flops(),
        Some(DcssModel::F64(n)) => n.true_flops(),
        None => 0,
    }
}

#[no_mangle]
pub unsafe extern "C" fn dcss_model_is_gated(model: *const DcssModel) -> bool {
    match model.as_ref() {
        Some(DcssModel::F32(n)) => n.is_gated(),
        Some(DcssModel::F64(n)) => n.is_gated(),
        None => false,
    }
}

/// Slim plan of a searched network at temperature `tau`, as JSON. Free with
/// `dcss_string_free`.
#[no_mangle]
pub unsafe extern "C" fn dcss_model_derive_plan(model: *const DcssModel, tau: f64, out: *mut *mut c_char) -> DcssStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let plan = match model {
            DcssModel::F32(n) => derive_plan(n, tau),
            DcssModel::F64(n) => derive_plan(n, tau),
        }
        .map_err(lib)?;
        *out = owned_string(serde_json::to_string_pretty(&plan).map_err(|e| lib(e.into()))?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dcss_model_free(model: *mut DcssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the oracle-equivalence and gradient suites. Writes the number of
/// suites and of passing suites; returns `DCSS_STATUS_OK` even when some fail.
#[no_mangle]
pub unsafe extern "C" fn dcss_verify(seed: u64, instances: usize, passed: *mut usize, total: *mut usize) -> DcssStatus {
    guard(|| {
        if passed.is_null() || total.is_null() {
            return Err(null("passed/total"));
        }
        let results = run_all(seed, instances);
        *total = results.len();
        *passed = results.iter().filter(|r| r.passed).count();
        Ok(())
    })
}
