//! C ABI for grenol.
//!
//! Every function returns a [`GrenolStatus`]. On failure a message is kept
//! per thread and can be read with [`grenol_last_error_message`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use grenol::braingraph::{pairing_edges, Adjacency, BrainGraph};
use grenol::checkpoint::load_checkpoint;
use grenol::evalmetrics::{graph_distance, subject_rng};
use grenol::sampler::Sampler;
use grenol::schedule::{
    cosine_schedule, DiffusionMode, NoiseSchedule, ScheduleConfig, DEFAULT_COSINE_OFFSET,
};
use grenol::trainer::TrainedModel;
use grenol::{Error, ErrorClass};

/// Bumped whenever a signature or struct layout in this header changes.
pub const GRENOL_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrenolStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Unreadable, malformed or inconsistent input data or files.
    Data = 3,
    Numeric = 4,
    Panic = 5,
}

/// `mode` values accepted by [`grenol_schedule_new`].
pub const GRENOL_MODE_PAPER: u32 = 0;
pub const GRENOL_MODE_STANDARD: u32 = 1;

/// One row of a noise schedule.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrenolScheduleRow {
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

/// A loaded checkpoint ready for sampling.
pub struct GrenolModel {
    model: TrainedModel,
    schedule: NoiseSchedule,
}

pub struct GrenolSchedule {
    inner: NoiseSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GrenolStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.class() {
            ErrorClass::Usage => GrenolStatus::InvalidArgument,
            ErrorClass::Data => GrenolStatus::Data,
            ErrorClass::Numeric => GrenolStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GrenolStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GrenolStatus::InvalidArgument, msg.into())
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> GrenolStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GrenolStatus::Ok,
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
            set_last_error(format!("internal panic: {msg}"));
            GrenolStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn square(n: usize) -> Result<usize, Failure> {
    n.checked_mul(n)
        .ok_or_else(|| invalid("node count overflows"))
}

#[no_mangle]
pub extern "C" fn grenol_abi_version() -> u32 {
    GRENOL_ABI_VERSION
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the size needed for the
/// full message including the NUL, or 0 when there is no error. `buf` may be
/// null to query the size.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn grenol_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Builds the `n × n` morphological adjacency of `nodes` into `out`
/// (row-major, `n * n` doubles).
///
/// # Safety
/// `nodes` must hold `n` doubles and `out` must have room for `n * n`.
#[no_mangle]
pub unsafe extern "C" fn grenol_pairing_edges(
    nodes: *const f64,
    n: usize,
    out: *mut f64,
) -> GrenolStatus {
    run(|| {
        let nodes = slice(nodes, n, "nodes")?;
        let out = slice_mut(out, square(n)?, "out")?;
        out.copy_from_slice(pairing_edges(nodes)?.as_slice());
        Ok(())
    })
}

/// Element-wise MSE and Frobenius distance between two `n × n` matrices.
///
/// # Safety
/// `a` and `b` must each hold `n * n` doubles; `mse` and `frobenius` must be
/// valid for one write.
#[no_mangle]
pub unsafe extern "C" fn grenol_graph_distance(
    a: *const f64,
    b: *const f64,
    n: usize,
    mse: *mut f64,
    frobenius: *mut f64,
) -> GrenolStatus {
    run(|| {
        let len = square(n)?;
        let a = Adjacency::from_vec(n, slice(a, len, "a")?.to_vec())?;
        let b = Adjacency::from_vec(n, slice(b, len, "b")?.to_vec())?;
        if mse.is_null() {
            return Err(null("mse"));
        }
        if frobenius.is_null() {
            return Err(null("frobenius"));
        }
        let d = graph_distance(&a, &b)?;
        *mse = d.mse;
        *frobenius = d.frobenius;
        Ok(())
    })
}

/// Cosine schedule with `steps` steps and noise scale `k`. `mode` is
/// `GRENOL_MODE_PAPER` or `GRENOL_MODE_STANDARD`.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn grenol_schedule_new(
    steps: usize,
    k: f64,
    mode: u32,
    out: *mut *mut GrenolSchedule,
) -> GrenolStatus {
    run(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match mode {
            GRENOL_MODE_PAPER => DiffusionMode::Paper,
            GRENOL_MODE_STANDARD => DiffusionMode::Standard,
            other => return Err(invalid(format!("unknown mode {other}"))),
        };
        let inner = cosine_schedule(ScheduleConfig {
            steps,
            k,
            mode,
            offset: DEFAULT_COSINE_OFFSET,
        })?;
        *out = Box::into_raw(Box::new(GrenolSchedule { inner }));
        Ok(())
    })
}

/// # Safety
/// `schedule` must be null or a handle from [`grenol_schedule_new`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn grenol_schedule_free(schedule: *mut GrenolSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Number of steps `T`; 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grenol_schedule_len(schedule: *const GrenolSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.inner.steps())
}

/// Coefficients of step `t` in `1..=T`.
///
/// # Safety
/// `schedule` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn grenol_schedule_values(
    schedule: *const GrenolSchedule,
    t: usize,
    out: *mut GrenolScheduleRow,
) -> GrenolStatus {
    run(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        s.check_t(t)?;
        *out = GrenolScheduleRow {
            t,
            beta: s.beta(t),
            alpha: s.alpha(t),
            alpha_bar: s.alpha_bar(t),
            sigma: s.sigma(t),
        };
        Ok(())
    })
}

/// Loads a checkpoint written by `grenol train`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn grenol_model_load(
    path: *const c_char,
    out: *mut *mut GrenolModel,
) -> GrenolStatus {
    run(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let model = load_checkpoint(PathBuf::from(path), None)?;
        let schedule = cosine_schedule(model.schedule)?;
        *out = Box::into_raw(Box::new(GrenolModel { model, schedule }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`grenol_model_load`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn grenol_model_free(model: *mut GrenolModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Nodes per graph expected by the model; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grenol_model_node_count(model: *const GrenolModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.model.node_count)
}

/// Predicts a target graph from raw source measurements.
///
/// `source` holds `n` raw source-metric values (`n` must equal the model's
/// node count). Writes `n` raw target values to `out_nodes` and the `n × n`
/// adjacency to `out_adjacency`. The result depends only on the model, the
/// inputs and `seed`, and matches `grenol sample --seed`.
///
/// # Safety
/// `model` must be a live handle, `source` and `out_nodes` must hold `n`
/// doubles and `out_adjacency` must have room for `n * n`.
#[no_mangle]
pub unsafe extern "C" fn grenol_model_sample(
    model: *const GrenolModel,
    source: *const f64,
    n: usize,
    seed: u64,
    out_nodes: *mut f64,
    out_adjacency: *mut f64,
) -> GrenolStatus {
    run(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let expected = m.model.model.node_count;
        if n != expected {
            return Err(invalid(format!("model expects {expected} nodes, got {n}")));
        }
        let source = slice(source, n, "source")?;
        let out_nodes = slice_mut(out_nodes, n, "out_nodes")?;
        let out_adjacency = slice_mut(out_adjacency, square(n)?, "out_adjacency")?;
        let tm = &m.model;
        let src = BrainGraph::from_raw(
            "ffi",
            tm.hemisphere,
            &tm.metrics.source,
            source.to_vec(),
            &tm.scaler,
        )?;
        let sampler = Sampler::new(
            &tm.params,
            &tm.model,
            &m.schedule,
            Some(&tm.scaler),
            &tm.metrics.target,
        );
        let pred = sampler.sample_target(&src, &mut subject_rng(seed, 0), None)?;
        out_nodes.copy_from_slice(&pred.raw_nodes);
        out_adjacency.copy_from_slice(pred.adjacency.as_slice());
        Ok(())
    })
}
