//! C interface to the count backends, plausibility scoring, generation,
//! BLEU and the learning-rate schedule.
//!
//! Every fallible function returns a [`ComveStatus`]. On failure the message
//! is kept per thread and can be read with [`comve_last_error`]. Strings
//! returned through `char **` out-parameters are owned by the caller and must
//! be released with [`comve_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use comve_core::backends::{BigramGenerator, CountMaskedLm, Markers};
use comve_core::corpus::{ensure_terminal_period, prepare_statement, StatementPair};
use comve_core::generation::{generate_reason, DecodeConfig, Strategy};
use comve_core::metrics::corpus_bleu;
use comve_core::plausibility::{choose_plausible, pseudo_log_likelihood, Normalization};
use comve_core::training::{lr_at_step, TrainingConfig};
use comve_core::Error;

pub const COMVE_NORMALIZATION_RAW: u32 = 0;
pub const COMVE_NORMALIZATION_LENGTH_ROOT: u32 = 1;
pub const COMVE_NORMALIZATION_PERPLEXITY: u32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComveStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Failed = 5,
    Panic = 6,
}

/// Unigram masked LM trained on a corpus.
pub struct ComveMaskedLm(CountMaskedLm);

/// Bigram generator trained on a corpus.
pub struct ComveGenerator(BigramGenerator);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComveBleuReport {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComveDecodeOptions {
    pub max_new_tokens: usize,
    /// Sample instead of taking the most probable token.
    pub sample: bool,
    pub temperature: f64,
    /// 0 keeps the whole vocabulary.
    pub top_k: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(ComveStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => ComveStatus::Io,
            Error::EmptyInput(_)
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::Sequence(_)
            | Error::Parse { .. } => ComveStatus::InvalidArgument,
            _ => ComveStatus::Failed,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ComveStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ComveStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ComveStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside comve");
            ComveStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(ComveStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ComveStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(ComveStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(ComveStatus::NullPointer, format!("{what} is null")))
}

fn normalization(mode: u32) -> Result<Normalization, Fail> {
    match mode {
        COMVE_NORMALIZATION_RAW => Ok(Normalization::Raw),
        COMVE_NORMALIZATION_LENGTH_ROOT => Ok(Normalization::LengthRoot),
        COMVE_NORMALIZATION_PERPLEXITY => Ok(Normalization::Perplexity),
        m => Err(invalid(format!("unknown normalization {m}"))),
    }
}

fn owned_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(ComveStatus::Failed, "result contains a nul byte".into()))
}

fn corpus_lines(corpus: &str) -> Vec<&str> {
    corpus.lines().collect()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn comve_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn comve_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn comve_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Trains a unigram masked LM on `corpus`, one text per line.
///
/// # Safety
/// `corpus` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_masked_lm_new(
    corpus: *const c_char,
    alpha: f64,
    out: *mut *mut ComveMaskedLm,
) -> ComveStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = ptr::null_mut();
        let lm = CountMaskedLm::train(&corpus_lines(text(corpus, "corpus")?), alpha)?;
        *slot = Box::into_raw(Box::new(ComveMaskedLm(lm)));
        Ok(())
    })
}

/// # Safety
/// `lm` must come from [`comve_masked_lm_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn comve_masked_lm_free(lm: *mut ComveMaskedLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Pseudo-log-likelihood of a statement, normalized by `normalization`
/// (one of the `COMVE_NORMALIZATION_*` values). The statement is
/// period-normalized, tokenized and wrapped in markers first.
///
/// # Safety
/// Pointers must be valid; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_pll_score(
    lm: *const ComveMaskedLm,
    statement: *const c_char,
    normalization: u32,
    content_only: bool,
    out_value: *mut f64,
) -> ComveStatus {
    guard(|| {
        let lm = &handle(lm, "lm")?.0;
        let mode = self::normalization(normalization)?;
        let seq = prepare_statement(text(statement, "statement")?, &Markers::default())?;
        let score = pseudo_log_likelihood(&seq, lm, content_only)?.normalized(mode)?;
        *out(out_value, "out_value")? = score.value;
        Ok(())
    })
}

/// Index (0 or 1) of the more plausible statement; ties go to 0 and set
/// `out_tie`.
///
/// # Safety
/// Pointers must be valid; `out_index` and `out_tie` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_choose_plausible(
    lm: *const ComveMaskedLm,
    sent0: *const c_char,
    sent1: *const c_char,
    normalization: u32,
    content_only: bool,
    out_index: *mut usize,
    out_tie: *mut bool,
) -> ComveStatus {
    guard(|| {
        let lm = &handle(lm, "lm")?.0;
        let mode = self::normalization(normalization)?;
        let pair = StatementPair::new("ffi", text(sent0, "sent0")?, text(sent1, "sent1")?, None)?;
        let choice = choose_plausible(&pair, lm, mode, content_only)?;
        *out(out_index, "out_index")? = choice.index;
        *out(out_tie, "out_tie")? = choice.tie;
        Ok(())
    })
}

/// Trains a bigram generator on `corpus`, one text per line.
///
/// # Safety
/// `corpus` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_generator_new(
    corpus: *const c_char,
    alpha: f64,
    out: *mut *mut ComveGenerator,
) -> ComveStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = ptr::null_mut();
        let g = BigramGenerator::train(&corpus_lines(text(corpus, "corpus")?), alpha)?;
        *slot = Box::into_raw(Box::new(ComveGenerator(g)));
        Ok(())
    })
}

/// # Safety
/// `g` must come from [`comve_generator_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn comve_generator_free(g: *mut ComveGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Defaults: 30 tokens, greedy, temperature 1, full vocabulary, seed 0.
#[no_mangle]
pub extern "C" fn comve_decode_options_default() -> ComveDecodeOptions {
    let d = DecodeConfig::default();
    ComveDecodeOptions {
        max_new_tokens: d.max_new_tokens,
        sample: d.strategy == Strategy::Sample,
        temperature: d.temperature,
        top_k: d.top_k.unwrap_or(0),
        seed: d.seed,
    }
}

/// Generates a reason for `statement`. `options` may be null for the
/// defaults. The result goes to `*out` and must be freed with
/// [`comve_string_free`].
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_generate_reason(
    g: *const ComveGenerator,
    statement: *const c_char,
    options: *const ComveDecodeOptions,
    out: *mut *mut c_char,
) -> ComveStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = ptr::null_mut();
        let g = &handle(g, "generator")?.0;
        let o = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| comve_decode_options_default());
        let cfg = DecodeConfig {
            max_new_tokens: o.max_new_tokens,
            strategy: if o.sample { Strategy::Sample } else { Strategy::Greedy },
            temperature: o.temperature,
            top_k: (o.top_k > 0).then_some(o.top_k),
            seed: o.seed,
            ..DecodeConfig::default()
        };
        *slot = owned_string(generate_reason(text(statement, "statement")?, g, &cfg)?)?;
        Ok(())
    })
}

/// Corpus BLEU over `n` examples. Example `i` has `reference_counts[i]`
/// references, stored consecutively in `references`.
///
/// # Safety
/// `candidates` and `reference_counts` must hold `n` entries and
/// `references` their sum; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_corpus_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    reference_counts: *const usize,
    n: usize,
    out: *mut ComveBleuReport,
) -> ComveStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("no examples"));
        }
        if candidates.is_null() || references.is_null() || reference_counts.is_null() {
            return Err(Fail(ComveStatus::NullPointer, "array argument is null".into()));
        }
        let cands = std::slice::from_raw_parts(candidates, n)
            .iter()
            .map(|&c| text(c, "candidate"))
            .collect::<Result<Vec<_>, _>>()?;
        let counts = std::slice::from_raw_parts(reference_counts, n);
        let total: usize = counts.iter().sum();
        let flat = std::slice::from_raw_parts(references, total)
            .iter()
            .map(|&r| text(r, "reference"))
            .collect::<Result<Vec<_>, _>>()?;
        let mut refs = Vec::with_capacity(n);
        let mut at = 0;
        for &k in counts {
            refs.push(flat[at..at + k].to_vec());
            at += k;
        }
        let r = corpus_bleu(&cands, &refs)?;
        *self::out(out, "out")? = ComveBleuReport {
            score: r.score,
            precisions: r.precisions,
            brevity_penalty: r.brevity_penalty,
            candidate_length: r.candidate_length,
            reference_length: r.reference_length,
        };
        Ok(())
    })
}

/// Learning rate at `step` for linear warmup to `peak` over `warmup_steps`
/// and linear decay to 0 at `max_steps`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_lr_at_step(
    step: usize,
    peak: f64,
    warmup_steps: usize,
    max_steps: usize,
    out: *mut f64,
) -> ComveStatus {
    guard(|| {
        let cfg = TrainingConfig {
            learning_rate: peak,
            warmup_steps,
            max_steps,
            ..TrainingConfig::default()
        };
        *self::out(out, "out")? = lr_at_step(step, &cfg)?;
        Ok(())
    })
}

/// Appends a period unless the text already ends in `.`, `!` or `?`.
///
/// # Safety
/// `input` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn comve_ensure_terminal_period(input: *const c_char, out: *mut *mut c_char) -> ComveStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = ptr::null_mut();
        *slot = owned_string(ensure_terminal_period(text(input, "input")?)?)?;
        Ok(())
    })
}
