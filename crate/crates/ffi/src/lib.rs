//! C interface to the verification side of `tisv`: load an embedding
//! network, embed waveforms, enroll speakers, score and decide trials.
//!
//! Objects are opaque handles released with their `_free` function. Every
//! call returns a [`TisvStatus`]; on failure a message is available from
//! [`tisv_last_error`] until the next failing call on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tisv::checkpoint::load_network;
use tisv::network::SeNetwork;
use tisv::params::ParameterStore;
use tisv::verification::{compute_eer, decide, enroll, score, Decision, DecisionPolicy, SpeakerModel};
use tisv::Error;

/// Status codes. The non-zero error values match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TisvStatus {
    Ok = 0,
    /// Invalid configuration, shape or argument.
    Config = 2,
    /// Unreadable or malformed data or checkpoint.
    Data = 3,
    /// A null pointer where a value was required.
    NullArgument = 5,
    /// Internal failure; the message has details.
    Internal = 6,
}

/// A loaded embedding network.
pub struct TisvEmbedder {
    net: SeNetwork,
    store: ParameterStore,
}

/// An enrolled speaker.
pub struct TisvSpeakerModel {
    model: SpeakerModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TisvStatus {
    match e.exit_code() {
        2 => TisvStatus::Config,
        3 => TisvStatus::Data,
        _ => TisvStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (TisvStatus, String)>) -> TisvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TisvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TisvStatus::Internal
        }
    }
}

fn lib(e: Error) -> (TisvStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TisvStatus, String) {
    (TisvStatus::NullArgument, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (TisvStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failing call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tisv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads an embedding checkpoint written by `tisv train-base` or `tisv finetune`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tisv_embedder_load(path: *const c_char, out: *mut *mut TisvEmbedder) -> TisvStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| (TisvStatus::Config, "path is not UTF-8".to_string()))?;
        let (net, store, _) = load_network(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(TisvEmbedder { net, store }));
        Ok(())
    })
}

/// # Safety
/// `e` must come from [`tisv_embedder_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tisv_embedder_free(e: *mut TisvEmbedder) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `e` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tisv_embedder_dim(e: *const TisvEmbedder) -> usize {
    e.as_ref().map_or(0, |e| e.net.config().embed_dim)
}

/// Samples per input window, or 0 for a null handle. Longer inputs are
/// center-cropped and shorter ones zero-padded.
///
/// # Safety
/// `e` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tisv_embedder_input_len(e: *const TisvEmbedder) -> usize {
    e.as_ref().map_or(0, |e| e.net.config().input_len)
}

/// Embeds `n_samples` samples into `out`, which holds `out_len` values and
/// must be at least the embedding dimension.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn tisv_embed(
    e: *const TisvEmbedder,
    samples: *const f64,
    n_samples: usize,
    out: *mut f64,
    out_len: usize,
) -> TisvStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(|| null("embedder"))?;
        let x = slice(samples, n_samples, "samples")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = e.net.config().embed_dim;
        if out_len < d {
            return Err((TisvStatus::Config, format!("output holds {out_len} values, embedding has {d}")));
        }
        let len = e.net.config().input_len;
        let mut window = x[x.len().saturating_sub(len) / 2..].to_vec();
        window.resize(len, 0.0);
        let emb = e.net.embed_frozen(&e.store, &[window.as_slice()], 1).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, d).copy_from_slice(&emb[0]);
        Ok(())
    })
}

/// Enrolls a speaker from `m` row-major embeddings of dimension `dim`.
///
/// # Safety
/// `embeddings` must hold `m * dim` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tisv_enroll(
    embeddings: *const f64,
    m: usize,
    dim: usize,
    out: *mut *mut TisvSpeakerModel,
) -> TisvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let n = m.checked_mul(dim).ok_or_else(|| (TisvStatus::Config, "m * dim overflows".to_string()))?;
        let flat = slice(embeddings, n, "embeddings")?;
        let rows: Vec<Vec<f64>> = if dim == 0 { Vec::new() } else { flat.chunks(dim).map(<[f64]>::to_vec).collect() };
        let model = enroll(&rows, "").map_err(lib)?;
        *out = Box::into_raw(Box::new(TisvSpeakerModel { model }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`tisv_enroll`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tisv_model_free(m: *mut TisvSpeakerModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Cosine similarity between a test embedding and the model centroid.
///
/// # Safety
/// `x` must hold `dim` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tisv_score(m: *const TisvSpeakerModel, x: *const f64, dim: usize, out: *mut f64) -> TisvStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let x = slice(x, dim, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = score(&m.model, x).map_err(lib)?;
        Ok(())
    })
}

/// Sets `accept` to 1 when `score > threshold`, else 0. The threshold must lie in [-1, 1].
///
/// # Safety
/// `accept` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tisv_decide(score: f64, threshold: f64, accept: *mut i32) -> TisvStatus {
    guard(|| {
        if accept.is_null() {
            return Err(null("accept"));
        }
        let policy = DecisionPolicy::new(threshold).map_err(lib)?;
        *accept = i32::from(decide(score, policy) == Decision::Accept);
        Ok(())
    })
}

/// Equal error rate (a fraction) and its threshold from target and impostor scores.
///
/// # Safety
/// Score arrays must hold the given counts; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tisv_compute_eer(
    targets: *const f64,
    n_targets: usize,
    impostors: *const f64,
    n_impostors: usize,
    eer: *mut f64,
    threshold: *mut f64,
) -> TisvStatus {
    guard(|| {
        let t = slice(targets, n_targets, "targets")?;
        let i = slice(impostors, n_impostors, "impostors")?;
        if eer.is_null() || threshold.is_null() {
            return Err(null("output"));
        }
        let r = compute_eer(t, i).map_err(lib)?;
        *eer = r.eer;
        *threshold = r.threshold;
        Ok(())
    })
}
