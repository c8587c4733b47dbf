//! C interface for translating with a trained checkpoint.
//!
//! The surface is handle-based: [`sbsg_translator_open`] loads a checkpoint
//! and vocabulary from disk, [`sbsg_translate`] turns one whitespace-tokenized
//! line into a translated line, and [`sbsg_translator_close`] releases the
//! handle. Fallible calls return an [`SbsgStatus`]; the message behind the
//! most recent failure on the calling thread is available from
//! [`sbsg_last_error`]. Strings handed out by the library belong to the
//! caller and must be released with [`sbsg_string_free`].
//!
//! The generated header lives in `include/sbsg.h` and is refreshed on every
//! build.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use sbsg::data::Vocabulary;
use sbsg::decoding::{translate_ids, DecodeConfig};
use sbsg::error::SbsgError;
use sbsg::model::{load_checkpoint, ModelConfig, Params};

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbsgStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The request contradicts the loaded model: bad beam width, length
    /// budget out of range, vocabulary/checkpoint mismatch.
    Config = 3,
    /// Everything else: unreadable files, malformed checkpoints, decode
    /// failures.
    Runtime = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

/// Records the message and hands the status back so call sites read as
/// `return fail(...)`.
fn fail(status: SbsgStatus, msg: impl AsRef<str>) -> SbsgStatus {
    let cleaned: Vec<u8> = msg.as_ref().bytes().filter(|&b| b != 0).collect();
    let msg = CString::new(cleaned).expect("NUL bytes were just removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
    status
}

fn fail_from(err: &SbsgError) -> SbsgStatus {
    let status = match err {
        SbsgError::Config(_) => SbsgStatus::Config,
        _ => SbsgStatus::Runtime,
    };
    fail(status, err.to_string())
}

/// Checks a C string argument: NULL and bad encodings become statuses with
/// the offending argument named in the error message.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SbsgStatus> {
    if ptr.is_null() {
        return Err(fail(
            SbsgStatus::NullArgument,
            format!("{what} must not be NULL"),
        ));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(SbsgStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// One loaded model plus its search settings; opaque to C.
pub struct SbsgTranslator {
    config: ModelConfig,
    params: Params,
    vocab: Vocabulary,
    /// 0 decodes greedily, anything else is the beam width.
    beam: usize,
    /// Length-penalty exponent; only consulted when `beam > 0`.
    alpha: f64,
    max_len: usize,
}

impl SbsgTranslator {
    fn decode_config(&self) -> DecodeConfig {
        if self.beam == 0 {
            DecodeConfig::greedy(self.max_len)
        } else {
            DecodeConfig::beam(self.beam, self.alpha, self.max_len)
        }
    }
}

/// Loads a checkpoint and its vocabulary and hands back a translator that
/// decodes greedily with the model's full position budget. Adjust the search
/// with [`sbsg_translator_set_beam`] and [`sbsg_translator_set_max_len`].
///
/// On success writes the new handle to `*out` and returns [`SbsgStatus::Ok`];
/// on failure writes NULL and returns the reason.
///
/// # Safety
/// `ckpt_path` and `vocab_path` must be NUL-terminated strings or NULL, and
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sbsg_translator_open(
    ckpt_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut SbsgTranslator,
) -> SbsgStatus {
    if out.is_null() {
        return fail(SbsgStatus::NullArgument, "out must not be NULL");
    }
    *out = ptr::null_mut();
    let ckpt = match str_arg(ckpt_path, "ckpt_path") {
        Ok(s) => s.to_string(),
        Err(status) => return status,
    };
    let vocab_path = match str_arg(vocab_path, "vocab_path") {
        Ok(s) => s.to_string(),
        Err(status) => return status,
    };
    let (config, params) = match load_checkpoint(Path::new(&ckpt)) {
        Ok(loaded) => loaded,
        Err(e) => return fail_from(&e),
    };
    let vocab = match Vocabulary::load(Path::new(&vocab_path)) {
        Ok(v) => v,
        Err(e) => return fail_from(&e),
    };
    if vocab.size() != config.vocab_size {
        return fail(
            SbsgStatus::Config,
            format!(
                "vocabulary has {} entries but the checkpoint was trained with {}",
                vocab.size(),
                config.vocab_size
            ),
        );
    }
    let translator = SbsgTranslator {
        max_len: config.max_positions,
        config,
        params,
        vocab,
        beam: 0,
        alpha: 0.0,
    };
    *out = Box::into_raw(Box::new(translator));
    SbsgStatus::Ok
}

/// Releases a handle from [`sbsg_translator_open`]. NULL is a no-op.
///
/// # Safety
/// `t` must be NULL or a handle that has not already been closed.
#[no_mangle]
pub unsafe extern "C" fn sbsg_translator_close(t: *mut SbsgTranslator) {
    if t.is_null() {
        return;
    }
    drop(Box::from_raw(t));
}

/// Switches the search. `beam` 0 decodes greedily; anything else keeps that
/// many live streams and picks the finished hypothesis with the best
/// length-penalized score, exponent `alpha`. Models that generate from both
/// ends need an even width.
///
/// # Safety
/// `t` must be NULL or a live handle from [`sbsg_translator_open`].
#[no_mangle]
pub unsafe extern "C" fn sbsg_translator_set_beam(
    t: *mut SbsgTranslator,
    beam: usize,
    alpha: f64,
) -> SbsgStatus {
    let Some(t) = t.as_mut() else {
        return fail(SbsgStatus::NullArgument, "t must not be NULL");
    };
    let candidate = DecodeConfig {
        beam: if beam == 0 { None } else { Some(beam) },
        alpha,
        max_len: t.max_len,
    };
    if let Err(e) = candidate.validate(t.config.mode) {
        return fail_from(&e);
    }
    t.beam = beam;
    t.alpha = alpha;
    SbsgStatus::Ok
}

/// Caps how many tokens each stream may emit, end marker included. Must be
/// between 2 and the model's position budget.
///
/// # Safety
/// `t` must be NULL or a live handle from [`sbsg_translator_open`].
#[no_mangle]
pub unsafe extern "C" fn sbsg_translator_set_max_len(
    t: *mut SbsgTranslator,
    max_len: usize,
) -> SbsgStatus {
    let Some(t) = t.as_mut() else {
        return fail(SbsgStatus::NullArgument, "t must not be NULL");
    };
    if max_len < 2 || max_len > t.config.max_positions {
        return fail(
            SbsgStatus::Config,
            format!(
                "max_len {} must be between 2 and the model's position budget {}",
                max_len, t.config.max_positions
            ),
        );
    }
    t.max_len = max_len;
    SbsgStatus::Ok
}

/// Translates one whitespace-tokenized line. On success writes a freshly
/// allocated NUL-terminated string to `*out_line` (empty input produces an
/// empty string); release it with [`sbsg_string_free`]. On failure writes
/// NULL.
///
/// # Safety
/// `t` must be NULL or a live handle, `line` a NUL-terminated string or
/// NULL, and `out_line` writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn sbsg_translate(
    t: *const SbsgTranslator,
    line: *const c_char,
    out_line: *mut *mut c_char,
) -> SbsgStatus {
    if out_line.is_null() {
        return fail(SbsgStatus::NullArgument, "out_line must not be NULL");
    }
    *out_line = ptr::null_mut();
    let Some(t) = t.as_ref() else {
        return fail(SbsgStatus::NullArgument, "t must not be NULL");
    };
    let line = match str_arg(line, "line") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
    let rendered = if tokens.is_empty() {
        String::new()
    } else {
        let result = match translate_ids(
            &t.vocab.encode(&tokens),
            &t.params,
            &t.config,
            &t.decode_config(),
        ) {
            Ok(r) => r,
            Err(e) => return fail_from(&e),
        };
        let words = match t.vocab.decode(&result.tokens) {
            Ok(w) => w,
            Err(e) => return fail_from(&e),
        };
        words.join(" ")
    };
    // Vocabulary entries cannot contain NUL, so this conversion always
    // succeeds; the branch exists so a future regression fails instead of
    // panicking across the boundary.
    match CString::new(rendered) {
        Ok(s) => {
            *out_line = s.into_raw();
            SbsgStatus::Ok
        }
        Err(_) => fail(SbsgStatus::Runtime, "translation contained a NUL byte"),
    }
}

/// Releases a string allocated by this library. NULL is a no-op.
///
/// # Safety
/// `s` must be NULL or a string from [`sbsg_translate`] that has not already
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn sbsg_string_free(s: *mut c_char) {
    if s.is_null() {
        return;
    }
    drop(CString::from_raw(s));
}

/// Message behind the most recent failure on the calling thread; the empty
/// string until one happens. The pointer stays valid until the next failing
/// call on the same thread, so copy it out if you need it longer.
#[no_mangle]
pub extern "C" fn sbsg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn sbsg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
