//! C ABI over `keycvae`: PI controller and model handles, annealing
//! schedules and the text metrics.
//!
//! Every fallible function returns a [`KcStatus`]; on failure the message is
//! available from [`kc_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;

use keycvae::control::{cost_anneal_weight, cyclical_anneal_weight, pi_update, PIConfig, PIControllerState};
use keycvae::data::{parse_spec, Vocabulary};
use keycvae::gen_metrics::{bleu, dis_n, generate, rouge_l, self_bleu, DecodeMode, GenerationRequest, BLEU_EPSILON};
use keycvae::model::{LatentDistribution, Model};
use keycvae::objective::gaussian_kl;
use keycvae::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Numeric = 6,
    Calibration = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: KcStatus, msg: impl Into<String>) -> KcStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> KcStatus {
    let status = match &e {
        Error::Shape(_) | Error::Input(_) | Error::Config(_) => KcStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::Diverged { .. } => KcStatus::Numeric,
        Error::Parse { .. } => KcStatus::Parse,
        Error::Checkpoint { .. } => KcStatus::Checkpoint,
        Error::Calibration(_) => KcStatus::Calibration,
        Error::Io(_) => KcStatus::Io,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> KcStatus + UnwindSafe) -> KcStatus {
    match catch_unwind(f) {
        Ok(s) => s,
        Err(_) => fail(KcStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, KcStatus> {
    if p.is_null() {
        return Err(fail(KcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn texts<'a>(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<&'a str>, KcStatus> {
    if p.is_null() && n > 0 {
        return Err(fail(KcStatus::NullPointer, format!("{what} is null")));
    }
    (0..n).map(|i| text(*p.add(i), what)).collect()
}

unsafe fn floats<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], KcStatus> {
    if p.is_null() {
        return Err(fail(KcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Interns whitespace-separated words so metrics compare surface forms.
struct Words(Vocabulary);

impl Words {
    fn new() -> Self {
        Words(Vocabulary::new([]))
    }

    fn ids(&mut self, s: &str) -> Vec<u32> {
        s.split_whitespace().map(|w| self.0.push(w)).collect()
    }
}

macro_rules! out_ptr {
    ($p:expr) => {
        if $p.is_null() {
            return fail(KcStatus::NullPointer, concat!(stringify!($p), " is null"));
        }
    };
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes without the
/// terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn kc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// PI controller with its running state.
pub struct KcPiController {
    config: PIConfig,
    state: PIControllerState,
}

/// Creates a controller. `anti_windup` is 0 or 1.
///
/// # Safety
/// `out` must be valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn kc_pi_new(setpoint: f64, kp: f64, ki: f64, anti_windup: i32, out: *mut *mut KcPiController) -> KcStatus {
    out_ptr!(out);
    guard(move || {
        let config = PIConfig {
            setpoint,
            kp,
            ki,
            sample_period: 1,
            anti_windup: anti_windup != 0,
        };
        if let Err(e) = config.validate() {
            return from_error(e);
        }
        let h = Box::new(KcPiController {
            config,
            state: PIControllerState::default(),
        });
        *out = Box::into_raw(h);
        KcStatus::Ok
    })
}

/// Feeds one KL observation and writes the clamped weight to `weight`.
///
/// # Safety
/// `h` must come from [`kc_pi_new`]; `weight` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_pi_update(h: *mut KcPiController, kl: f64, weight: *mut f64) -> KcStatus {
    out_ptr!(h);
    out_ptr!(weight);
    let h = &mut *h;
    match pi_update(h.state, kl, &h.config) {
        Ok((w, s)) => {
            h.state = s;
            *weight = w;
            KcStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Current integral accumulator.
///
/// # Safety
/// `h` must come from [`kc_pi_new`].
#[no_mangle]
pub unsafe extern "C" fn kc_pi_integral(h: *const KcPiController) -> f64 {
    if h.is_null() {
        return f64::NAN;
    }
    (*h).state.integral
}

/// # Safety
/// `h` must come from [`kc_pi_new`].
#[no_mangle]
pub unsafe extern "C" fn kc_pi_reset(h: *mut KcPiController) -> KcStatus {
    out_ptr!(h);
    (*h).state = PIControllerState::default();
    KcStatus::Ok
}

/// # Safety
/// `h` must come from [`kc_pi_new`] or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn kc_pi_free(h: *mut KcPiController) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Sigmoid annealing weight at `step`.
#[no_mangle]
pub extern "C" fn kc_cost_anneal_weight(step: u64, midpoint: f64, slope: f64) -> f64 {
    cost_anneal_weight(step, midpoint, slope)
}

/// Cyclical annealing weight at `step`.
#[no_mangle]
pub extern "C" fn kc_cyclical_anneal_weight(step: u64, total: u64, cycles: u64, ratio: f64) -> f64 {
    if cycles == 0 || ratio <= 0.0 {
        return f64::NAN;
    }
    cyclical_anneal_weight(step, total, cycles, ratio)
}

/// A trained model with its vocabulary.
pub struct KcModel {
    model: Model,
    vocab: Vocabulary,
}

/// Loads a model or trainer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_model_load(path: *const c_char, out: *mut *mut KcModel) -> KcStatus {
    out_ptr!(out);
    let path = tri!(text(path, "path"));
    guard(move || match keycvae::trainer::load_model(Path::new(path)) {
        Ok((model, vocab)) => {
            *out = Box::into_raw(Box::new(KcModel { model, vocab }));
            KcStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

/// Vocabulary size of a loaded model, 0 for null.
///
/// # Safety
/// `h` must come from [`kc_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn kc_model_vocab_size(h: *const KcModel) -> usize {
    if h.is_null() {
        0
    } else {
        (*h).vocab.len()
    }
}

/// Generates text for a `keyword:order ...` spec. `temperature <= 0`
/// decodes greedily. The NUL-terminated result is written to `buf`;
/// `needed` receives its length without the terminator. Returns
/// `BufferTooSmall` (with `needed` set) when `len` is insufficient.
///
/// # Safety
/// `h` must come from [`kc_model_load`]; `spec` must be NUL-terminated;
/// `buf` must be valid for `len` bytes; `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_model_generate(
    h: *const KcModel,
    spec: *const c_char,
    seed: u64,
    temperature: f64,
    max_len: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> KcStatus {
    out_ptr!(h);
    out_ptr!(needed);
    let spec = tri!(text(spec, "spec"));
    let h = &*h;
    guard(move || {
        let spec = match parse_spec(spec, &h.vocab) {
            Ok(s) => s,
            Err(m) => return fail(KcStatus::Parse, m),
        };
        let mode = if temperature > 0.0 {
            DecodeMode::Temperature(temperature)
        } else {
            DecodeMode::Greedy
        };
        let mut req = GenerationRequest::new(spec, mode, seed);
        req.max_len = max_len;
        let words = match generate(&h.model, &req).and_then(|g| h.vocab.decode(&g)) {
            Ok(w) => w,
            Err(e) => return from_error(e),
        };
        *needed = words.len();
        if buf.is_null() || len <= words.len() {
            return fail(KcStatus::BufferTooSmall, format!("need {} bytes", words.len() + 1));
        }
        std::ptr::copy_nonoverlapping(words.as_ptr(), buf.cast::<u8>(), words.len());
        *buf.add(words.len()) = 0;
        KcStatus::Ok
    })
}

/// # Safety
/// `h` must come from [`kc_model_load`] or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn kc_model_free(h: *mut KcModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// LCS F1 of two whitespace-tokenized strings.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_rouge_l(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> KcStatus {
    out_ptr!(out);
    let c = tri!(text(candidate, "candidate"));
    let r = tri!(text(reference, "reference"));
    let mut w = Words::new();
    match rouge_l(&w.ids(c), &w.ids(r)) {
        Ok(v) => {
            *out = v;
            KcStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Cumulative BLEU up to `max_n` with the default smoothing floor.
///
/// # Safety
/// `refs` must point to `n_refs` NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_bleu(
    candidate: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
    max_n: usize,
    out: *mut f64,
) -> KcStatus {
    out_ptr!(out);
    let c = tri!(text(candidate, "candidate"));
    let rs = tri!(texts(refs, n_refs, "refs"));
    let mut w = Words::new();
    let c = w.ids(c);
    let rs: Vec<Vec<u32>> = rs.iter().map(|r| w.ids(r)).collect();
    let views: Vec<&[u32]> = rs.iter().map(|r| r.as_slice()).collect();
    match bleu(&c, &views, max_n, BLEU_EPSILON) {
        Ok(v) => {
            *out = v;
            KcStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Mean BLEU of each text against the others.
///
/// # Safety
/// `texts_ptr` must point to `n` NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_self_bleu(texts_ptr: *const *const c_char, n: usize, max_n: usize, out: *mut f64) -> KcStatus {
    out_ptr!(out);
    let ts = tri!(texts(texts_ptr, n, "texts"));
    let mut w = Words::new();
    let corpus: Vec<Vec<u32>> = ts.iter().map(|t| w.ids(t)).collect();
    match self_bleu(&corpus, max_n, BLEU_EPSILON) {
        Ok(v) => {
            *out = v;
            KcStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Distinct `order`-grams across `n` texts.
///
/// # Safety
/// `texts_ptr` must point to `n` NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kc_dis_n(texts_ptr: *const *const c_char, n: usize, order: usize, out: *mut usize) -> KcStatus {
    out_ptr!(out);
    if order == 0 {
        return fail(KcStatus::InvalidArgument, "n-gram order must be at least 1");
    }
    let ts = tri!(texts(texts_ptr, n, "texts"));
    let mut w = Words::new();
    let corpus: Vec<Vec<u32>> = ts.iter().map(|t| w.ids(t)).collect();
    *out = dis_n(&corpus, order);
    KcStatus::Ok
}

/// `KL(q || p)` between diagonal Gaussians given means and log standard
/// deviations, each `dim` long.
///
/// # Safety
/// All arrays must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kc_gaussian_kl(
    mu_q: *const f64,
    log_sigma_q: *const f64,
    mu_p: *const f64,
    log_sigma_p: *const f64,
    dim: usize,
    out: *mut f64,
) -> KcStatus {
    out_ptr!(out);
    let q = LatentDistribution {
        mu: tri!(floats(mu_q, dim, "mu_q")).to_vec(),
        log_sigma: tri!(floats(log_sigma_q, dim, "log_sigma_q")).to_vec(),
    };
    let p = LatentDistribution {
        mu: tri!(floats(mu_p, dim, "mu_p")).to_vec(),
        log_sigma: tri!(floats(log_sigma_p, dim, "log_sigma_p")).to_vec(),
    };
    match gaussian_kl(&q, &p) {
        Ok(v) => {
            *out = v;
            KcStatus::Ok
        }
        Err(e) => from_error(e),
    }
}
