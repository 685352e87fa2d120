//! C ABI over a trained model: load from a saved directory, run inference on
//! whitespace-tokenized text, inspect the chain, free the handle.
//!
//! Every entry point returns a [`DsmoeStatus`]. On failure the message is
//! kept per thread and can be copied out with [`dsmoe_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dsmoe::complexity::{complexity_score, extract_features, ComplexityWeights};
use dsmoe::harness;
use dsmoe::model::DsMoe;
use dsmoe::routing::ChainTrace;
use dsmoe::taskgen::SampleRecord;
use dsmoe::vocab::Vocab;
use dsmoe::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    /// Unknown token, unbalanced markers or empty input.
    Input = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Opaque model handle.
pub struct DsmoeModel {
    model: DsMoe,
}

/// Summary of one inference.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct DsmoeInference {
    pub predicted: u32,
    /// Chain length chosen by the router.
    pub k: u32,
    /// Steps actually executed.
    pub steps: u32,
    pub complexity: f64,
    pub routing_macs: u64,
    pub total_macs: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DsmoeStatus {
    match e {
        Error::Io(_) => DsmoeStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => DsmoeStatus::Checkpoint,
        Error::Config(_) | Error::Calibration(_) => DsmoeStatus::Config,
        Error::Features(_) | Error::Label(_) | Error::Data(_) => DsmoeStatus::Input,
        Error::Numeric(_) => DsmoeStatus::Numeric,
        _ => DsmoeStatus::Internal,
    }
}

/// Run `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DsmoeStatus, String)>) -> DsmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsmoeStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside dsmoe".into());
            DsmoeStatus::Internal
        }
    }
}

fn lift<T>(r: dsmoe::Result<T>) -> Result<T, (DsmoeStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, (DsmoeStatus, String)> {
    if p.is_null() {
        return Err((DsmoeStatus::NullPointer, "null string argument".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (DsmoeStatus::InvalidUtf8, e.to_string()))
}

fn encode(text: &str) -> Result<Vec<usize>, (DsmoeStatus, String)> {
    Vocab::standard().encode(text).map(|s| s.tokens).map_err(|e| (DsmoeStatus::Input, e.to_string()))
}

fn infer(model: &DsMoe, text: &str) -> Result<ChainTrace, (DsmoeStatus, String)> {
    let tokens = encode(text)?;
    let sample = SampleRecord {
        id: 0,
        tier: 0,
        inner_tier: None,
        hint: dsmoe::experts::ExpertKind::Spe,
        tokens,
        answer: 0,
        seed: 0,
    };
    let mut t = lift(model.predict(&sample))?;
    t.correct = None;
    Ok(t)
}

/// Load a model saved by the `train` command.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_load(dir: *const c_char, out: *mut *mut DsmoeModel) -> DsmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err((DsmoeStatus::NullPointer, "null output pointer".into()));
        }
        *out = ptr::null_mut();
        let dir = read_str(dir)?;
        let model = lift(harness::load_model(Path::new(dir)))?;
        if model.config.routing && model.thresholds.is_none() {
            return Err((DsmoeStatus::Config, "saved model has no depth thresholds".into()));
        }
        *out = Box::into_raw(Box::new(DsmoeModel { model }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`dsmoe_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_model_free(model: *mut DsmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Classify `text` and summarise the executed chain.
///
/// # Safety
/// All pointers must be valid; `text` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_infer(
    model: *const DsmoeModel,
    text: *const c_char,
    out: *mut DsmoeInference,
) -> DsmoeStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return Err((DsmoeStatus::NullPointer, "null model or output pointer".into()));
        }
        let t = infer(&(*model).model, read_str(text)?)?;
        *out = DsmoeInference {
            predicted: t.predicted.unwrap_or(0) as u32,
            k: t.k as u32,
            steps: t.steps.len() as u32,
            complexity: t.score,
            routing_macs: t.routing_macs,
            total_macs: t.total_macs,
        };
        Ok(())
    })
}

/// Full chain trace of `text` as JSON into `buf`. `needed` receives the
/// byte length including the terminator, also when `buf` is too small.
///
/// # Safety
/// `buf` must hold `len` bytes (it may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn dsmoe_trace_json(
    model: *const DsmoeModel,
    text: *const c_char,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> DsmoeStatus {
    guard(|| {
        if model.is_null() || needed.is_null() {
            return Err((DsmoeStatus::NullPointer, "null model or length pointer".into()));
        }
        let t = infer(&(*model).model, read_str(text)?)?;
        let json = lift(serde_json::to_string(&t).map_err(Error::from))?;
        copy_out(&json, buf, len, needed)
    })
}

/// Complexity score of `text` under unit feature weights, or under the
/// model's learned weights when `model` is non-null.
///
/// # Safety
/// `text` NUL-terminated, `out` valid; `model` null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsmoe_complexity(
    model: *const DsmoeModel,
    text: *const c_char,
    out: *mut f64,
) -> DsmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err((DsmoeStatus::NullPointer, "null output pointer".into()));
        }
        let tokens = encode(read_str(text)?)?;
        let f = lift(Vocab::standard().sequence(tokens).and_then(|s| extract_features(&s)))?;
        let w = if model.is_null() { ComplexityWeights::default() } else { (*model).model.complexity_weights() };
        *out = lift(complexity_score(&f, &w))?;
        Ok(())
    })
}

unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), (DsmoeStatus, String)> {
    *needed = s.len() + 1;
    if buf.is_null() || len < s.len() + 1 {
        return Err((DsmoeStatus::BufferTooSmall, format!("need {} bytes", s.len() + 1)));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Copy the calling thread's last error message into `buf`. Returns the
/// length including the terminator; nothing is written if `len` is smaller.
///
/// # Safety
/// `buf` must hold `len` bytes (it may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn dsmoe_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let mut n = 0;
        let _ = copy_out(&msg, buf, len, &mut n);
        n
    })
}
