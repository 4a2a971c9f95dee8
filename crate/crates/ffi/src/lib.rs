//! C ABI over a trained `causalcap` checkpoint and the caption metrics.
//!
//! Every fallible function returns a [`CcStatus`]. On failure a message is
//! kept per thread and read back with [`cc_last_error_message`]. Models are
//! opaque [`CcModel`] handles owned by the caller and released with
//! [`cc_model_free`]. Panics never cross the boundary; they surface as
//! [`CcStatus::Panic`].
//!
//! Images are passed as row-major `uint32_t` cell arrays with explicit height
//! and width, token sequences as `uint32_t` arrays with a length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use causalcap::captioner::{decode, CaptionModel, Checkpoint, DecodeStrategy, SceneImage};
use causalcap::error::Error;
use causalcap::metrics::{bleu4, contains_phrase, ndcg_at_k, precision_at_k, rouge_l, RankingJudgment};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Capacity = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Divergence = 7,
    /// The output buffer is too small; the required length is still written.
    BufferTooSmall = 8,
    Panic = 9,
}

/// Decoding strategy selector for [`cc_decode`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcStrategyKind {
    Greedy = 0,
    Beam = 1,
    TopK = 2,
    Nucleus = 3,
    Ancestral = 4,
}

/// `width` is read for beam search, `k` for top-K and `p` for nucleus
/// sampling. Other fields are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CcStrategy {
    pub kind: CcStrategyKind,
    pub width: usize,
    pub k: usize,
    pub p: f64,
}

/// Opaque handle to a loaded checkpoint.
pub struct CcModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let c = CString::new(bytes).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CcStatus {
    match e {
        Error::Input(_) => CcStatus::InvalidInput,
        Error::Capacity(_) => CcStatus::Capacity,
        Error::Config { .. } => CcStatus::Config,
        Error::Divergence(_) => CcStatus::Divergence,
        Error::Io { .. } => CcStatus::Io,
        Error::Format { .. } => CcStatus::Format,
    }
}

/// Failure inside a call, before it becomes a status code.
enum Fail {
    Status(CcStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(CcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CcStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CcStatus::Panic
        }
    }
}

/// Borrows `len` items at `ptr`. A null pointer is allowed only when `len`
/// is zero.
unsafe fn view<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn model<'a>(m: *const CcModel) -> Result<&'a CcModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image(cells: *const u32, height: usize, width: usize) -> Result<SceneImage, Fail> {
    let n = height
        .checked_mul(width)
        .ok_or_else(|| Fail::Status(CcStatus::InvalidInput, "grid size overflows".into()))?;
    let cells = view(cells, n, "cells")?;
    Ok(SceneImage::new(height, width, cells.to_vec())?)
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn cc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint JSON file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cc_model_load(path: *const c_char, out: *mut *mut CcModel) -> CcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail::Status(CcStatus::InvalidInput, "path is not UTF-8".into()))?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        out.write(Box::into_raw(Box::new(CcModel { checkpoint })));
        Ok(())
    })
}

/// Releases a handle from [`cc_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must come from [`cc_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cc_model_free(model: *mut CcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cc_model_vocab_size(model: *const CcModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.params.vocab_size())
}

/// Longest caption the model scores or decodes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cc_model_max_len(model: *const CcModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.params.max_len())
}

/// Writes the next-token log-probabilities after `prefix` into `out`, which
/// must hold at least the vocabulary size.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_next_token_log_probs(
    model: *const CcModel,
    cells: *const u32,
    height: usize,
    width: usize,
    prefix: *const u32,
    prefix_len: usize,
    out: *mut f64,
    out_len: usize,
) -> CcStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = image(cells, height, width)?;
        let prefix = view(prefix, prefix_len, "prefix")?;
        let dist = m.checkpoint.params.next_token(&img, prefix)?;
        let lp = dist.log_probs();
        if out_len < lp.len() {
            return Err(Fail::Status(
                CcStatus::BufferTooSmall,
                format!("output holds {out_len} values, vocabulary has {}", lp.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(lp.as_ptr(), out, lp.len());
        Ok(())
    })
}

/// Teacher-forced log-probability of the whole token sequence.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_sequence_log_prob(
    model: *const CcModel,
    cells: *const u32,
    height: usize,
    width: usize,
    tokens: *const u32,
    tokens_len: usize,
    out: *mut f64,
) -> CcStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = image(cells, height, width)?;
        let tokens = view(tokens, tokens_len, "tokens")?;
        let v = m.checkpoint.params.sequence_log_prob(&img, tokens)?;
        write_out(out, v, "out")
    })
}

fn strategy(s: &CcStrategy) -> DecodeStrategy {
    match s.kind {
        CcStrategyKind::Greedy => DecodeStrategy::Greedy,
        CcStrategyKind::Beam => DecodeStrategy::Beam { width: s.width },
        CcStrategyKind::TopK => DecodeStrategy::TopK { k: s.k },
        CcStrategyKind::Nucleus => DecodeStrategy::Nucleus { p: s.p },
        CcStrategyKind::Ancestral => DecodeStrategy::Ancestral,
    }
}

/// Decodes a caption into `out_tokens`. The caption length is always written
/// to `out_len`, also when the buffer is too small.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_decode(
    model: *const CcModel,
    cells: *const u32,
    height: usize,
    width: usize,
    strategy: CcStrategy,
    seed: u64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> CcStatus {
    guard(|| {
        let m = self::model(model)?;
        let img = image(cells, height, width)?;
        let caption = decode(&m.checkpoint.params, &img, self::strategy(&strategy), seed)?;
        write_out(out_len, caption.len(), "out_len")?;
        if capacity < caption.len() {
            return Err(Fail::Status(
                CcStatus::BufferTooSmall,
                format!("output holds {capacity} tokens, caption has {}", caption.len()),
            ));
        }
        if !caption.is_empty() {
            if out_tokens.is_null() {
                return Err(null("out_tokens"));
            }
            ptr::copy_nonoverlapping(caption.as_ptr(), out_tokens, caption.len());
        }
        Ok(())
    })
}

/// Sentence BLEU-4 of a hypothesis against one reference.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_bleu4(
    hypothesis: *const u32,
    hypothesis_len: usize,
    reference: *const u32,
    reference_len: usize,
    out: *mut f64,
) -> CcStatus {
    guard(|| {
        let h = view(hypothesis, hypothesis_len, "hypothesis")?;
        let r = view(reference, reference_len, "reference")?;
        write_out(out, bleu4(h, &[r])?, "out")
    })
}

/// ROUGE-L F-measure of a hypothesis against one reference.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_rouge_l(
    hypothesis: *const u32,
    hypothesis_len: usize,
    reference: *const u32,
    reference_len: usize,
    out: *mut f64,
) -> CcStatus {
    guard(|| {
        let h = view(hypothesis, hypothesis_len, "hypothesis")?;
        let r = view(reference, reference_len, "reference")?;
        write_out(out, rouge_l(h, r)?, "out")
    })
}

/// Writes 1 to `out` when `phrase` occurs contiguously in `caption`, else 0.
/// This is the per-caption hallucination test behind CHAIR_s.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn cc_contains_phrase(
    caption: *const u32,
    caption_len: usize,
    phrase: *const u32,
    phrase_len: usize,
    out: *mut i32,
) -> CcStatus {
    guard(|| {
        let c = view(caption, caption_len, "caption")?;
        let p = view(phrase, phrase_len, "phrase")?;
        write_out(out, contains_phrase(c, p) as i32, "out")
    })
}

unsafe fn judgment(relevance: *const u8, len: usize) -> Result<RankingJudgment, Fail> {
    Ok(RankingJudgment::new(view(relevance, len, "relevance")?.to_vec())?)
}

/// Precision@k of a ranked 0/1 relevance list.
///
/// # Safety
/// `relevance` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cc_precision_at_k(relevance: *const u8, len: usize, k: usize, out: *mut f64) -> CcStatus {
    guard(|| write_out(out, precision_at_k(&judgment(relevance, len)?, k)?, "out"))
}

/// nDCG@k of a ranked 0/1 relevance list.
///
/// # Safety
/// `relevance` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cc_ndcg_at_k(relevance: *const u8, len: usize, k: usize, out: *mut f64) -> CcStatus {
    guard(|| write_out(out, ndcg_at_k(&judgment(relevance, len)?, k)?, "out"))
}
