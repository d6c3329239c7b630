//! C ABI over `ltv-core`.
//!
//! Every entry point returns an [`LtvStatus`]; outputs go through caller
//! pointers. On failure the message is kept per thread and can be copied
//! out with [`ltv_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ltv_core::data::{GameRecord, LtvSample, UserRecord, GAMES_FILE, USERS_FILE};
use ltv_core::error::Error;
use ltv_core::model::{encode_batch, load_model, predict_batch, Model};
use ltv_core::pareto::{solve_qp, WeightVector};
use ltv_core::ziln::{self, ZilnParams};
use ltv_core::{io_util, metrics};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LtvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    Parse = 5,
    MissingArtifact = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded checkpoint together with the catalogs needed to encode samples.
pub struct LtvModel {
    model: Model,
    users: Vec<UserRecord>,
    games: Vec<GameRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(LtvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => LtvStatus::Io,
            Error::NonFinite(_) | Error::Numeric(_) => LtvStatus::Numeric,
            Error::Parse { .. } | Error::Json(_) => LtvStatus::Parse,
            Error::MissingArtifact(_) => LtvStatus::MissingArtifact,
            _ => LtvStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LtvStatus::NullPointer, format!("null pointer: {what}"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LtvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LtvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LtvStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `value` writable storage.
unsafe fn put<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Fail(LtvStatus::InvalidArgument, format!("{what}: not UTF-8")))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ltv_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// ZILN mass at `y = 0`, density for `y > 0`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ltv_ziln_pdf(p_raw: f64, mu: f64, sigma_raw: f64, y: f64, out: *mut f64) -> LtvStatus {
    guard(|| put(out, ziln::ziln_pdf(&ZilnParams::new(p_raw, mu, sigma_raw), y)?, "out"))
}

/// ZILN negative log-likelihood of `y`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ltv_ziln_nll(p_raw: f64, mu: f64, sigma_raw: f64, y: f64, out: *mut f64) -> LtvStatus {
    guard(|| put(out, ziln::ziln_nll(&ZilnParams::new(p_raw, mu, sigma_raw), y)?, "out"))
}

/// Expected value and purchase probability of a ZILN head.
///
/// # Safety
/// Both output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ltv_ziln_predict(
    p_raw: f64,
    mu: f64,
    sigma_raw: f64,
    expected_value: *mut f64,
    purchase_prob: *mut f64,
) -> LtvStatus {
    guard(|| {
        let z = ziln::ziln_predict(&ZilnParams::new(p_raw, mu, sigma_raw));
        put(expected_value, z.expected_value, "expected_value")?;
        put(purchase_prob, z.purchase_prob, "purchase_prob")
    })
}

/// Preference vector from spherical coordinates `(u, v)` into `out[3]`.
///
/// # Safety
/// `out` must point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ltv_weight_from_uv(u: f64, v: f64, out: *mut f64) -> LtvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = WeightVector::from_uv(u, v)?.as_array();
        std::ptr::copy_nonoverlapping(w.as_ptr(), out, 3);
        Ok(())
    })
}

/// Anchored QP over `m` tasks. `k` is the row-major `m×m` Gram matrix,
/// `task_set` lists the constrained task indices. Writes `beta_out[m]`.
///
/// # Safety
/// Array arguments must hold the stated number of elements; scalar
/// outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ltv_solve_qp(
    k: *const f64,
    anchor: *const f64,
    m: usize,
    task_set: *const usize,
    n_task: usize,
    beta_out: *mut f64,
    objective: *mut f64,
    kkt_residual: *mut f64,
    relaxed: *mut bool,
) -> LtvStatus {
    guard(|| {
        let kf = slice(k, m * m, "k")?;
        let a = slice(anchor, m, "anchor")?;
        let ts = slice(task_set, n_task, "task_set")?;
        if beta_out.is_null() {
            return Err(null("beta_out"));
        }
        let rows: Vec<Vec<f64>> = kf.chunks(m.max(1)).map(<[f64]>::to_vec).collect();
        let sol = solve_qp(&rows, a, ts)?;
        std::ptr::copy_nonoverlapping(sol.beta.as_ptr(), beta_out, m);
        put(objective, sol.objective_value, "objective")?;
        put(kkt_residual, sol.kkt_residual, "kkt_residual")?;
        put(relaxed, sol.relaxed, "relaxed")
    })
}

/// `Σ|pred - true| / Σ true`.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ltv_nmae(y_true: *const f64, y_pred: *const f64, n: usize, out: *mut f64) -> LtvStatus {
    guard(|| put(out, metrics::nmae(slice(y_true, n, "y_true")?, slice(y_pred, n, "y_pred")?)?, "out"))
}

/// ROC AUC of `scores` against binary `labels` (nonzero = positive).
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ltv_auc(labels: *const u8, scores: *const f64, n: usize, out: *mut f64) -> LtvStatus {
    guard(|| {
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&b| b != 0).collect();
        put(out, metrics::auc(&l, slice(scores, n, "scores")?)?, "out")
    })
}

/// Normalized Gini of `y_pred` against `y_true`.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ltv_n_gini(y_true: *const f64, y_pred: *const f64, n: usize, out: *mut f64) -> LtvStatus {
    guard(|| put(out, metrics::n_gini(slice(y_true, n, "y_true")?, slice(y_pred, n, "y_pred")?)?, "out"))
}

/// `|Σ day1 - Σ day2| / Σ day1`.
///
/// # Safety
/// Arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ltv_stability_diff(day1: *const f64, day2: *const f64, n: usize, out: *mut f64) -> LtvStatus {
    guard(|| put(out, metrics::stability_diff(slice(day1, n, "day1")?, slice(day2, n, "day2")?)?, "out"))
}

/// Loads a checkpoint and the user/game catalogs from `data_dir`.
/// Release the handle with [`ltv_model_free`].
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ltv_model_load(
    checkpoint_path: *const c_char,
    data_dir: *const c_char,
    out: *mut *mut LtvModel,
) -> LtvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_model(Path::new(text(checkpoint_path, "checkpoint_path")?))?;
        let dir = Path::new(text(data_dir, "data_dir")?);
        let (_, users) = io_util::read_jsonl(&dir.join(USERS_FILE))?;
        let (_, games) = io_util::read_jsonl(&dir.join(GAMES_FILE))?;
        let handle = Box::new(LtvModel {
            model: ck.model,
            users,
            games,
        });
        out.write(Box::into_raw(handle));
        Ok(())
    })
}

/// Predicts samples given as JSON Lines in the samples file format.
/// Writes `3·n` expected values (3-, 7-, 30-day per sample) into `out`,
/// which holds `cap` doubles, and the sample count into `n_samples`.
/// Returns `BufferTooSmall` with `n_samples` set when `cap < 3·n`.
///
/// # Safety
/// `model` must come from [`ltv_model_load`]; `samples_jsonl` must be
/// NUL-terminated; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn ltv_model_predict(
    model: *const LtvModel,
    samples_jsonl: *const c_char,
    out: *mut f64,
    cap: usize,
    n_samples: *mut usize,
) -> LtvStatus {
    guard(|| {
        let h = model.as_ref().ok_or_else(|| null("model"))?;
        let src = text(samples_jsonl, "samples_jsonl")?;
        let mut samples = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let s: LtvSample = serde_json::from_str(line)
                .map_err(|e| Fail(LtvStatus::Parse, format!("samples line {}: {e}", i + 1)))?;
            samples.push(s);
        }
        put(n_samples, samples.len(), "n_samples")?;
        if cap < 3 * samples.len() {
            return Err(Fail(
                LtvStatus::BufferTooSmall,
                format!("need {} doubles, got {cap}", 3 * samples.len()),
            ));
        }
        if samples.is_empty() {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let refs: Vec<&LtvSample> = samples.iter().collect();
        let batch = encode_batch(&h.model.schema, &h.users, &h.games, &refs)?;
        let preds = predict_batch(&h.model, &batch)?;
        let dst = std::slice::from_raw_parts_mut(out, 3 * samples.len());
        for (row, p) in dst.chunks_mut(3).zip(&preds) {
            for (o, z) in row.iter_mut().zip(p) {
                *o = ziln::ziln_predict(z).expected_value;
            }
        }
        Ok(())
    })
}

/// Releases a handle from [`ltv_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ltv_model_free(model: *mut LtvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
