//! C ABI over the fedgkd simulator.
//!
//! Every function returns an [`FgkdStatus`]. On failure the message is kept in
//! thread-local storage and read back with [`fgkd_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Panics never cross the boundary; they surface as `FGKD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedgkd::checkpoint;
use fedgkd::config::{parse_config_str, ExperimentConfig, Overrides};
use fedgkd::federation::vote_coefficients;
use fedgkd::harness::build_simulation;
use fedgkd::losses::kl_div;
use fedgkd::nn::{predict, softmax, softmax_rows, Activation};
use fedgkd::{Error, MlpSpec, ParamVector, RoundRecord, Simulation};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Shape = 4,
    NonFinite = 5,
    Config = 6,
    Parse = 7,
    Dataset = 8,
    Checkpoint = 9,
    ClientAbort = 10,
    Io = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgkdActivation {
    Relu = 0,
    Tanh = 1,
}

/// Scalar outcome of one communication round.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FgkdRoundSummary {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub mean_client_train_loss: f64,
    pub payload_multiplier: usize,
    pub num_sampled: usize,
    pub clamp_events: usize,
}

/// A federated run in progress.
pub struct FgkdSimulation {
    sim: Simulation,
    last: Option<RoundRecord>,
}

/// A trained model loaded from a checkpoint.
pub struct FgkdModel {
    spec: MlpSpec,
    params: ParamVector,
}

struct Failure(FgkdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => FgkdStatus::Shape,
            Error::InvalidArgument(_) => FgkdStatus::InvalidArgument,
            Error::NonFinite(_) => FgkdStatus::NonFinite,
            Error::Config { .. } => FgkdStatus::Config,
            Error::Parse { .. } | Error::Json(_) => FgkdStatus::Parse,
            Error::Dataset(_) => FgkdStatus::Dataset,
            Error::Checkpoint(_) => FgkdStatus::Checkpoint,
            Error::ClientAbort { .. } => FgkdStatus::ClientAbort,
            Error::Io { .. } => FgkdStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F>(f: F) -> FgkdStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FgkdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            FgkdStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FgkdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(FgkdStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(src: &[f64], out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out_len < src.len() {
        return Err(Failure(
            FgkdStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, {} needed", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fgkd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fgkd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is accepted.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn fgkd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a simulation from TOML config text. Relative dataset paths resolve
/// against `base_dir`, or the working directory when it is NULL.
///
/// # Safety
/// `config_toml` and `base_dir` must be NUL-terminated strings or NULL; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_new(
    config_toml: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut FgkdSimulation,
) -> FgkdStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(config_toml, "config_toml")?;
        let base = if base_dir.is_null() { "." } else { str_arg(base_dir, "base_dir")? };
        let cfg: ExperimentConfig = parse_config_str(text, Path::new(base), &Overrides::default())?;
        let (sim, _) = build_simulation(&cfg)?;
        *out = Box::into_raw(Box::new(FgkdSimulation { sim, last: None }));
        Ok(())
    })
}

/// # Safety
/// `sim` must come from [`fgkd_simulation_new`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_free(sim: *mut FgkdSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs one round. A failed round leaves the simulation unchanged.
///
/// # Safety
/// `sim` must be a live handle; `out` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_run_round(
    sim: *mut FgkdSimulation,
    out: *mut FgkdRoundSummary,
) -> FgkdStatus {
    guard(|| {
        let handle = borrow_mut(sim, "sim")?;
        let rec = handle.sim.run_round()?;
        if let Some(out) = out.as_mut() {
            *out = FgkdRoundSummary {
                round: rec.round,
                test_accuracy: rec.test_accuracy,
                test_loss: rec.test_loss,
                mean_client_train_loss: rec.mean_client_train_loss,
                payload_multiplier: rec.payload_multiplier,
                num_sampled: rec.sampled_clients.len(),
                clamp_events: rec.clamp_events,
            };
        }
        handle.last = Some(rec);
        Ok(())
    })
}

/// Full JSON record of the last completed round, or NULL before the first.
/// Free the result with [`fgkd_string_free`].
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_last_record_json(sim: *const FgkdSimulation) -> *mut c_char {
    let mut result = ptr::null_mut();
    let status = guard(|| {
        let handle = borrow(sim, "sim")?;
        if let Some(rec) = &handle.last {
            let json = serde_json::to_string(rec).map_err(Error::from)?;
            result = CString::new(json).unwrap_or_default().into_raw();
        }
        Ok(())
    });
    if status == FgkdStatus::Ok {
        result
    } else {
        ptr::null_mut()
    }
}

/// Completed rounds so far.
///
/// # Safety
/// `sim` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_round(sim: *const FgkdSimulation) -> usize {
    sim.as_ref().map_or(0, |h| h.sim.round())
}

/// Length of the flat parameter vector, or 0 for NULL.
///
/// # Safety
/// `sim` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_param_count(sim: *const FgkdSimulation) -> usize {
    sim.as_ref().map_or(0, |h| h.sim.global().len())
}

/// Copies the global parameters into `out`, which must hold
/// [`fgkd_simulation_param_count`] values.
///
/// # Safety
/// `out` must be writable for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_copy_params(
    sim: *const FgkdSimulation,
    out: *mut f64,
    out_len: usize,
) -> FgkdStatus {
    guard(|| {
        let handle = borrow(sim, "sim")?;
        write_out(handle.sim.global(), out, out_len)
    })
}

/// Writes the current global model as a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fgkd_simulation_save_checkpoint(
    sim: *const FgkdSimulation,
    path: *const c_char,
) -> FgkdStatus {
    guard(|| {
        let handle = borrow(sim, "sim")?;
        let path = str_arg(path, "path")?;
        checkpoint::save(Path::new(path), handle.sim.spec(), handle.sim.global())?;
        Ok(())
    })
}

/// Loads a checkpoint. The file stores layer widths only, so the hidden
/// activation is supplied here.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgkd_model_load(
    path: *const c_char,
    activation: FgkdActivation,
    out: *mut *mut FgkdModel,
) -> FgkdStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let act = match activation {
            FgkdActivation::Relu => Activation::Relu,
            FgkdActivation::Tanh => Activation::Tanh,
        };
        let (spec, params) = checkpoint::load(Path::new(path), act)?;
        *out = Box::into_raw(Box::new(FgkdModel { spec, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`fgkd_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn fgkd_model_free(model: *mut FgkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fgkd_model_input_width(model: *const FgkdModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.input_width())
}

/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fgkd_model_num_classes(model: *const FgkdModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.num_classes())
}

/// Class probabilities for `rows` row-major inputs. `out` receives
/// `rows * num_classes` values.
///
/// # Safety
/// `x` must hold `rows * input_width` doubles; `out` must be writable for
/// `out_len`.
#[no_mangle]
pub unsafe extern "C" fn fgkd_model_predict_proba(
    model: *const FgkdModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> FgkdStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        let d = m.spec.input_width();
        let xs = slice_arg(x, rows * d, "x")?;
        let batch = ndarray::ArrayView2::from_shape((rows, d), xs)
            .map_err(|e| Failure(FgkdStatus::Shape, e.to_string()))?;
        let probs = softmax_rows(&predict(&m.params, &m.spec, batch)?, 1.0)?;
        let flat: Vec<f64> = probs.iter().copied().collect();
        write_out(&flat, out, out_len)
    })
}

/// KL(p || q) over two distributions of length `len`.
///
/// # Safety
/// `p` and `q` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgkd_kl_div(p: *const f64, q: *const f64, len: usize, out: *mut f64) -> FgkdStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        *out = kl_div(slice_arg(p, len, "p")?, slice_arg(q, len, "q")?)?;
        Ok(())
    })
}

/// Numerically stable softmax of `len` logits into `out`.
///
/// # Safety
/// `logits` and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fgkd_softmax(logits: *const f64, len: usize, out: *mut f64) -> FgkdStatus {
    guard(|| {
        let probs = softmax(slice_arg(logits, len, "logits")?)?;
        write_out(&probs, out, len)
    })
}

/// Per-teacher distillation weights from validation losses; they sum to
/// `2 * lambda`.
///
/// # Safety
/// `losses` and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fgkd_vote_coefficients(
    losses: *const f64,
    len: usize,
    lambda: f64,
    beta: f64,
    out: *mut f64,
) -> FgkdStatus {
    guard(|| {
        let g = vote_coefficients(slice_arg(losses, len, "losses")?, lambda, beta)?;
        write_out(&g, out, len)
    })
}
