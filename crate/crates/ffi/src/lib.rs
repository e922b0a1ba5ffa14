//! C ABI over the `dscls` classifier.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns a [`DsclsStatus`];
//! on failure, [`dscls_last_error`] describes the most recent error raised on
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dscls::engine::{self, Checkpoint, EngineError};
use dscls::tokenizer::{self, TokenizerError, Vocabulary};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsclsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadCheckpoint = 4,
    BadVocabulary = 5,
    InvalidArgument = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A loaded checkpoint: configuration, vocabulary and weights.
pub struct DsclsModel {
    ckpt: Checkpoint,
    labels: Vec<CString>,
}

/// A byte-level BPE vocabulary.
pub struct DsclsVocab {
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: DsclsStatus, message: impl ToString) -> DsclsStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
    status
}

/// Runs `f`, turning panics into [`DsclsStatus::Internal`].
fn guard(f: impl FnOnce() -> DsclsStatus) -> DsclsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(DsclsStatus::Internal, "internal panic"),
    }
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, DsclsStatus> {
    if ptr.is_null() {
        return Err(fail(DsclsStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| fail(DsclsStatus::InvalidUtf8, e))
}

fn engine_status(e: &EngineError) -> DsclsStatus {
    match e {
        EngineError::Io(_) => DsclsStatus::Io,
        _ => DsclsStatus::BadCheckpoint,
    }
}

fn tokenizer_status(e: &TokenizerError) -> DsclsStatus {
    match e {
        TokenizerError::Io(_) => DsclsStatus::Io,
        _ => DsclsStatus::BadVocabulary,
    }
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dscls_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dscls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dscls_model_load(path: *const c_char, out: *mut *mut DsclsModel) -> DsclsStatus {
    guard(|| {
        if out.is_null() {
            return fail(DsclsStatus::NullPointer, "null output handle");
        }
        let path = match read_str(path) {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        match engine::load_checkpoint(&path) {
            Ok(ckpt) => {
                let labels = ckpt
                    .task
                    .classes()
                    .iter()
                    .map(|l| CString::new(*l).expect("label has no NUL"))
                    .collect();
                *out = Box::into_raw(Box::new(DsclsModel { ckpt, labels }));
                DsclsStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e),
        }
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`dscls_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dscls_model_free(model: *mut DsclsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dscls_model_num_classes(model: *const DsclsModel) -> usize {
    model.as_ref().map_or(0, |m| m.labels.len())
}

/// Name of class `index`, or null when out of range. Owned by the model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dscls_model_label(model: *const DsclsModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.labels.get(index))
        .map_or(std::ptr::null(), |l| l.as_ptr())
}

unsafe fn classify(model: *const DsclsModel, text: *const c_char) -> Result<(usize, Vec<f64>), DsclsStatus> {
    let model = model
        .as_ref()
        .ok_or_else(|| fail(DsclsStatus::NullPointer, "null model handle"))?;
    let text = read_str(text)?;
    let ckpt = &model.ckpt;
    let encoded = tokenizer::encode(&ckpt.vocab, text, ckpt.train.max_len);
    let mut out = engine::predict_encoded(&ckpt.params, &ckpt.model, &[encoded], 1)
        .map_err(|e| fail(DsclsStatus::Internal, e))?;
    Ok(out.remove(0))
}

/// Predicted class index and its probability for one text.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, and both outputs
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dscls_model_predict(
    model: *const DsclsModel,
    text: *const c_char,
    out_class: *mut usize,
    out_confidence: *mut f64,
) -> DsclsStatus {
    guard(|| {
        if out_class.is_null() || out_confidence.is_null() {
            return fail(DsclsStatus::NullPointer, "null output pointer");
        }
        match classify(model, text) {
            Ok((class, probs)) => {
                *out_class = class;
                *out_confidence = probs.iter().copied().fold(0.0, f64::max);
                DsclsStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Writes the class probabilities of one text into `probs[0..num_classes]`.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, and `probs` valid for
/// `len` writes.
#[no_mangle]
pub unsafe extern "C" fn dscls_model_predict_proba(
    model: *const DsclsModel,
    text: *const c_char,
    probs: *mut f64,
    len: usize,
) -> DsclsStatus {
    guard(|| {
        if probs.is_null() {
            return fail(DsclsStatus::NullPointer, "null output buffer");
        }
        let needed = dscls_model_num_classes(model);
        if !model.is_null() && len < needed {
            return fail(DsclsStatus::BufferTooSmall, format!("buffer holds {len}, need {needed}"));
        }
        match classify(model, text) {
            Ok((_, p)) => {
                std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(&p);
                DsclsStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Loads a vocabulary JSON file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dscls_vocab_load(path: *const c_char, out: *mut *mut DsclsVocab) -> DsclsStatus {
    guard(|| {
        if out.is_null() {
            return fail(DsclsStatus::NullPointer, "null output handle");
        }
        let path = match read_str(path) {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        match Vocabulary::load(&path) {
            Ok(vocab) => {
                *out = Box::into_raw(Box::new(DsclsVocab { vocab }));
                DsclsStatus::Ok
            }
            Err(e) => fail(tokenizer_status(&e), e),
        }
    })
}

/// A copy of the vocabulary embedded in a model.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dscls_model_vocab(model: *const DsclsModel, out: *mut *mut DsclsVocab) -> DsclsStatus {
    guard(|| match (model.as_ref(), out.is_null()) {
        (Some(m), false) => {
            *out = Box::into_raw(Box::new(DsclsVocab {
                vocab: m.ckpt.vocab.clone(),
            }));
            DsclsStatus::Ok
        }
        _ => fail(DsclsStatus::NullPointer, "null model handle or output"),
    })
}

/// Releases a vocabulary; null is ignored.
///
/// # Safety
/// `vocab` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dscls_vocab_free(vocab: *mut DsclsVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Token count, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dscls_vocab_size(vocab: *const DsclsVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.vocab.size())
}

/// Encodes `text` as `[CLS] tokens [SEP]` padded to `max_len`, writing ids
/// and the attention mask (1 = real token). Returns the unpadded length in
/// `*out_len` when it is not null.
///
/// # Safety
/// `vocab` must be a live handle, `text` NUL-terminated, and `ids`/`mask`
/// valid for `max_len` writes.
#[no_mangle]
pub unsafe extern "C" fn dscls_encode(
    vocab: *const DsclsVocab,
    text: *const c_char,
    max_len: usize,
    ids: *mut u32,
    mask: *mut u8,
    out_len: *mut usize,
) -> DsclsStatus {
    guard(|| {
        let Some(vocab) = vocab.as_ref() else {
            return fail(DsclsStatus::NullPointer, "null vocabulary handle");
        };
        if ids.is_null() || mask.is_null() {
            return fail(DsclsStatus::NullPointer, "null output buffer");
        }
        if max_len < 2 {
            return fail(DsclsStatus::InvalidArgument, "max_len must be at least 2");
        }
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let e = tokenizer::encode(&vocab.vocab, text, max_len);
        std::slice::from_raw_parts_mut(ids, max_len).copy_from_slice(&e.ids);
        std::slice::from_raw_parts_mut(mask, max_len).copy_from_slice(&e.mask);
        if !out_len.is_null() {
            *out_len = e.len_unpadded();
        }
        DsclsStatus::Ok
    })
}
