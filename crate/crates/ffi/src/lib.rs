//! C interface to the genolm toolkit.
//!
//! Every fallible function returns a [`GlmStatus`]. On failure a message is
//! kept per thread and can be read with [`glm_last_error_message`]. Objects
//! crossing the boundary are opaque handles that must be released with their
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use genolm::error::{Error, ErrorKind};
use genolm::features::{kmer_frequencies, KMER_FEATURE_DIM};
use genolm::metrics::{accuracy, auc_roc, balanced_accuracy, f1, mcc, ConfusionMatrix};
use genolm::model::{embed, Transformer};
use genolm::tokenizer::{self, TokenSequence};

/// Result codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an out-of-range argument.
    InvalidArgument = 1,
    /// Malformed input data or an unreadable file.
    InputError = 2,
    /// The data cannot satisfy a constraint (too few clusters or examples).
    DataConstraint = 3,
    /// Failure while running a model or computing a metric.
    RuntimeError = 4,
    /// The output buffer is too small; the needed size is reported.
    BufferTooSmall = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Encoded token sequence.
pub struct GlmTokens {
    inner: TokenSequence,
}

/// Transformer loaded from a checkpoint.
pub struct GlmModel {
    inner: Transformer,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlmMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub balanced_accuracy: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlmSimilarity {
    pub identity: f64,
    pub coverage: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(GlmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Input => GlmStatus::InputError,
            ErrorKind::DataConstraint => GlmStatus::DataConstraint,
            ErrorKind::Runtime => GlmStatus::RuntimeError,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GlmStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GlmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GlmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("`{name}` is null")))
}

/// Copies `values` into a caller buffer of `capacity` elements and reports
/// the full length through `written`.
unsafe fn fill<T: Copy>(values: &[T], out: *mut T, capacity: usize, written: *mut usize) -> Result<(), Failure> {
    if let Some(w) = written.as_mut() {
        *w = values.len();
    }
    if capacity < values.len() {
        return Err(Failure(
            GlmStatus::BufferTooSmall,
            format!("buffer holds {capacity}, need {}", values.len()),
        ));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(invalid("output buffer is null"));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn glm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn glm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn glm_vocab_size() -> usize {
    tokenizer::VOCAB_SIZE
}

/// Length of the vector written by [`glm_kmer_frequencies`].
#[no_mangle]
pub extern "C" fn glm_kmer_feature_dim() -> usize {
    KMER_FEATURE_DIM
}

/// Tokenizes `sequence`. `max_tokens` of 0 means no limit.
///
/// # Safety
/// `sequence` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn glm_encode(sequence: *const c_char, max_tokens: usize, out: *mut *mut GlmTokens) -> GlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let s = str_arg(sequence, "sequence")?;
        let limit = (max_tokens > 0).then_some(max_tokens);
        let inner = tokenizer::encode(s, limit)?;
        *out = Box::into_raw(Box::new(GlmTokens { inner }));
        Ok(())
    })
}

/// Number of token ids in `tokens` (0 for null).
///
/// # Safety
/// `tokens` must be null or a handle from [`glm_encode`].
#[no_mangle]
pub unsafe extern "C" fn glm_tokens_len(tokens: *const GlmTokens) -> usize {
    tokens.as_ref().map_or(0, |t| t.inner.ids.len())
}

/// Borrowed pointer to the ids; valid while the handle lives.
///
/// # Safety
/// `tokens` must be null or a handle from [`glm_encode`].
#[no_mangle]
pub unsafe extern "C" fn glm_tokens_ids(tokens: *const GlmTokens) -> *const u32 {
    tokens.as_ref().map_or(std::ptr::null(), |t| t.inner.ids.as_ptr())
}

/// # Safety
/// `tokens` must be null or a handle from [`glm_encode`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glm_tokens_free(tokens: *mut GlmTokens) {
    if !tokens.is_null() {
        drop(Box::from_raw(tokens));
    }
}

/// Turns token ids back into a nucleotide string. Special tokens are
/// skipped. Free the result with [`glm_string_free`].
///
/// # Safety
/// `ids` must point to `len` readable values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn glm_decode(ids: *const u32, len: usize, out: *mut *mut c_char) -> GlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let ids = slice_arg(ids, len, "ids")?;
        let s = tokenizer::decode(ids)?;
        *out = CString::new(s).map_err(|_| invalid("decoded text contains NUL"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Accuracy, F1, MCC and balanced accuracy from class indices.
///
/// # Safety
/// `truth` and `predicted` must each point to `len` values; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn glm_classification_metrics(
    truth: *const u32,
    predicted: *const u32,
    len: usize,
    num_classes: usize,
    out: *mut GlmMetrics,
) -> GlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t: Vec<usize> = slice_arg(truth, len, "truth")?.iter().map(|&v| v as usize).collect();
        let p: Vec<usize> = slice_arg(predicted, len, "predicted")?.iter().map(|&v| v as usize).collect();
        let c = ConfusionMatrix::from_predictions(&t, &p, num_classes)?;
        *out = GlmMetrics {
            accuracy: accuracy(&c)?,
            f1: f1(&c)?,
            mcc: mcc(&c)?,
            balanced_accuracy: balanced_accuracy(&c)?,
        };
        Ok(())
    })
}

/// Binary ROC AUC; `labels` holds 0 or 1 per score.
///
/// # Safety
/// `scores` and `labels` must each point to `len` values; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn glm_auc_roc(scores: *const f64, labels: *const u8, len: usize, out: *mut f64) -> GlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = slice_arg(scores, len, "scores")?;
        let l = slice_arg(labels, len, "labels")?;
        if let Some(bad) = l.iter().find(|&&v| v > 1) {
            return Err(invalid(format!("label {bad} is not 0 or 1")));
        }
        let l: Vec<bool> = l.iter().map(|&v| v == 1).collect();
        *out = auc_roc(s, &l)?;
        Ok(())
    })
}

/// k-mer identity and coverage between two sequences.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn glm_similarity(a: *const c_char, b: *const c_char, k: usize, out: *mut GlmSimilarity) -> GlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (a, b) = (str_arg(a, "a")?, str_arg(b, "b")?);
        let k = if k == 0 { genolm::dataset::similarity::DEFAULT_K } else { k };
        let range = genolm::dataset::similarity::MIN_K..=genolm::dataset::similarity::MAX_K;
        if !range.contains(&k) {
            return Err(invalid(format!("k = {k} outside {range:?}")));
        }
        let e = genolm::dataset::similarity::estimate_similarity(a, b, k);
        *out = GlmSimilarity {
            identity: e.identity,
            coverage: e.coverage,
        };
        Ok(())
    })
}

/// Normalised k-mer frequencies for k = 3..7, concatenated.
///
/// # Safety
/// `sequence` must be NUL-terminated; `out` must hold `capacity` doubles;
/// `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn glm_kmer_frequencies(
    sequence: *const c_char,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> GlmStatus {
    guard(|| {
        let s = str_arg(sequence, "sequence")?;
        fill(&kmer_frequencies(s).values, out, capacity, written)
    })
}

/// Loads a transformer checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn glm_model_load(path: *const c_char, out: *mut *mut GlmModel) -> GlmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let p = str_arg(path, "path")?;
        let inner = Transformer::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(GlmModel { inner }));
        Ok(())
    })
}

/// Width of the vectors produced by [`glm_model_embed`] (0 for null).
///
/// # Safety
/// `model` must be null or a handle from [`glm_model_load`].
#[no_mangle]
pub unsafe extern "C" fn glm_model_embedding_dim(model: *const GlmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.embed_dim)
}

/// Mean-pooled embedding of one sequence.
///
/// # Safety
/// `model` must be a live handle, `sequence` NUL-terminated, `out` must hold
/// `capacity` doubles and `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn glm_model_embed(
    model: *const GlmModel,
    sequence: *const c_char,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> GlmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("`model` is null"))?;
        let s = str_arg(sequence, "sequence")?;
        let toks = tokenizer::encode(s, Some(m.inner.config.context_tokens))?;
        let v = embed(&m.inner, &[toks], 1)?;
        fill(&v[0], out, capacity, written)
    })
}

/// # Safety
/// `model` must be null or a handle from [`glm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glm_model_free(model: *mut GlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
