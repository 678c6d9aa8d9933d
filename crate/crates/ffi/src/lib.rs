//! C ABI over `adaptcl`.
//!
//! Every fallible call returns an [`AdaptclStatus`]; on failure the message
//! is available from [`adaptcl_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use adaptcl::error::Error;
use adaptcl::harness::checkpoint;
use adaptcl::inference::corpus_wer;
use adaptcl::methods::ParameterStore;
use adaptcl::metrics::{self, EvalMode, ResultMatrix};
use adaptcl::model::HybridModel;
use adaptcl::taskgen::{load_manifest, Manifest};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptclStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// A metric is undefined for the given inputs, e.g. COV with no gap.
    Undefined = 3,
    Integrity = 4,
    Io = 5,
    Protocol = 6,
    Panic = 7,
}

pub const ADAPTCL_MODE_TASK_LABEL: u32 = 0;
pub const ADAPTCL_MODE_CONF_INFER: u32 = 1;
pub const ADAPTCL_MODE_AVG_APT: u32 = 2;

/// A WER matrix; row `i` holds the WERs on tasks `1..=i` after training task `i`.
pub struct AdaptclMatrix {
    inner: ResultMatrix,
}

/// A model and its parameters restored from a checkpoint file.
pub struct AdaptclCheckpoint {
    model: HybridModel,
    store: ParameterStore,
}

/// An opened dataset manifest.
pub struct AdaptclManifest {
    inner: Manifest,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AdaptclStatus {
    match e {
        Error::UndefinedCov(_) => AdaptclStatus::Undefined,
        Error::Integrity(_) => AdaptclStatus::Integrity,
        Error::Io { .. } | Error::Json(_) => AdaptclStatus::Io,
        Error::Protocol(_) | Error::FreezeViolation(_) => AdaptclStatus::Protocol,
        _ => AdaptclStatus::InvalidArgument,
    }
}

struct Fail(AdaptclStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AdaptclStatus::NullArgument, format!("{what} is null"))
}

fn guarded(f: impl FnOnce() -> Result<(), Fail>) -> AdaptclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AdaptclStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AdaptclStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        Ok(&[])
    } else if p.is_null() {
        Err(null(what))
    } else {
        Ok(std::slice::from_raw_parts(p, len))
    }
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AdaptclStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn adaptcl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Token error rate in percent of `hyp` against a non-empty `reference`.
///
/// # Safety
/// The arrays must hold at least the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_wer(
    reference: *const u32,
    reference_len: usize,
    hyp: *const u32,
    hyp_len: usize,
    out: *mut f64,
) -> AdaptclStatus {
    guarded(|| {
        let r = slice(reference, reference_len, "reference")?;
        let h = slice(hyp, hyp_len, "hypothesis")?;
        write(out, metrics::wer(r, h)?)
    })
}

/// Share of the fine-tuning to separate-model gap closed, in percent.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_cov(avg_method: f64, avg_ft: f64, avg_sep: f64, out: *mut f64) -> AdaptclStatus {
    guarded(|| write(out, metrics::cov(avg_method, avg_ft, avg_sep)?))
}

#[no_mangle]
pub extern "C" fn adaptcl_matrix_new() -> *mut AdaptclMatrix {
    Box::into_raw(Box::new(AdaptclMatrix {
        inner: ResultMatrix::new(EvalMode::TaskLabel),
    }))
}

/// Appends the next row; its length must be one more than the previous row's.
///
/// # Safety
/// `matrix` must come from [`adaptcl_matrix_new`]; `row` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_matrix_push_row(matrix: *mut AdaptclMatrix, row: *const f64, len: usize) -> AdaptclStatus {
    guarded(|| {
        let m = matrix.as_mut().ok_or_else(|| null("matrix"))?;
        let r = slice(row, len, "row")?;
        Ok(m.inner.push_row(r.to_vec())?)
    })
}

/// # Safety
/// `matrix` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_matrix_avg(matrix: *const AdaptclMatrix, out: *mut f64) -> AdaptclStatus {
    guarded(|| write(out, metrics::avg(&get(matrix, "matrix")?.inner)?))
}

/// # Safety
/// `matrix` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_matrix_bwt(matrix: *const AdaptclMatrix, out: *mut f64) -> AdaptclStatus {
    guarded(|| write(out, metrics::bwt(&get(matrix, "matrix")?.inner)?))
}

/// Forward transfer against the diagonal of a fine-tuning matrix.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_matrix_fwt(
    matrix: *const AdaptclMatrix,
    fine_tuning: *const AdaptclMatrix,
    out: *mut f64,
) -> AdaptclStatus {
    guarded(|| {
        let ft = get(fine_tuning, "fine_tuning")?.inner.diagonal();
        write(out, metrics::fwt(&get(matrix, "matrix")?.inner, &ft)?)
    })
}

/// # Safety
/// `matrix` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_matrix_free(matrix: *mut AdaptclMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Loads and verifies a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_checkpoint_load(path_: *const c_char, out: *mut *mut AdaptclCheckpoint) -> AdaptclStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        out.write(ptr::null_mut());
        let (_, model, store) = checkpoint::load(&path(path_)?)?;
        out.write(Box::into_raw(Box::new(AdaptclCheckpoint { model, store })));
        Ok(())
    })
}

/// Number of adapter banks in the checkpoint; 0 for methods without adapters.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_checkpoint_num_banks(ckpt: *const AdaptclCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.store.banks.len())
}

/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_checkpoint_free(ckpt: *mut AdaptclCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Opens a dataset manifest and checks its records against the blob.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_manifest_load(path_: *const c_char, out: *mut *mut AdaptclManifest) -> AdaptclStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        out.write(ptr::null_mut());
        let inner = load_manifest(&path(path_)?)?;
        out.write(Box::into_raw(Box::new(AdaptclManifest { inner })));
        Ok(())
    })
}

/// # Safety
/// `manifest` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_manifest_len(manifest: *const AdaptclManifest) -> usize {
    manifest.as_ref().map_or(0, |m| m.inner.len())
}

/// # Safety
/// `manifest` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_manifest_free(manifest: *mut AdaptclManifest) {
    if !manifest.is_null() {
        drop(Box::from_raw(manifest));
    }
}

/// Decodes every utterance of `manifest` and writes the corpus WER.
/// `mode` is one of the `ADAPTCL_MODE_*` constants; `beam` must be positive.
///
/// # Safety
/// Both handles must be live and `out_wer` writable.
#[no_mangle]
pub unsafe extern "C" fn adaptcl_evaluate(
    ckpt: *const AdaptclCheckpoint,
    manifest: *const AdaptclManifest,
    mode: u32,
    beam: usize,
    out_wer: *mut f64,
) -> AdaptclStatus {
    guarded(|| {
        let c = get(ckpt, "checkpoint")?;
        let m = get(manifest, "manifest")?;
        let mode = match mode {
            ADAPTCL_MODE_TASK_LABEL => EvalMode::TaskLabel,
            ADAPTCL_MODE_CONF_INFER => EvalMode::ConfInfer,
            ADAPTCL_MODE_AVG_APT => EvalMode::AvgApt,
            other => return Err(Fail(AdaptclStatus::InvalidArgument, format!("unknown mode {other}"))),
        };
        if beam == 0 {
            return Err(Fail(AdaptclStatus::InvalidArgument, "beam must be positive".into()));
        }
        let decoder = c.store.decoder(&c.model).with_beam(beam);
        if mode != EvalMode::TaskLabel && !decoder.has_banks() {
            return Err(Fail(AdaptclStatus::InvalidArgument, format!("{mode} needs adapter banks")));
        }
        let utts = m.inner.utterances()?;
        write(out_wer, corpus_wer(&decoder, &utts, mode)?)
    })
}
