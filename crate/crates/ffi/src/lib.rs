//! C ABI over the `fedclust` engine.
//!
//! Every function returns an [`FcStatus`]. On failure the message is
//! available from [`fc_last_error`] on the same thread until the next call.
//! Objects are opaque handles created by `*_new`/`*_load`/`*_run` functions
//! and released with the matching `*_free`. Matrices are dense row-major
//! `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedclust::config::ExperimentConfig;
use fedclust::datasets::{load_dataset, DatasetFormat, EmbeddingDataset};
use fedclust::evaluation::{accuracy, nmi};
use fedclust::experiment::{cmd_run, RunSummary};
use fedclust::gum::{fit, GumConfig};
use fedclust::numerics::{kmeans_restarts, Matrix, Rng};
use fedclust::sinkhorn::{generate_pseudo_labels, TransportConfig};
use fedclust::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcStatus {
    Ok = 0,
    /// Null pointer, zero size or otherwise unusable argument.
    InvalidArgument = 1,
    Config = 2,
    /// Malformed or truncated file.
    Format = 3,
    Io = 4,
    Divergence = 5,
    /// Singular covariance, degenerate rows and similar numerical failures.
    Numerical = 6,
    /// The requested value does not exist, e.g. ACC for an unlabelled run.
    Unavailable = 7,
    Panic = 8,
}

/// A loaded embedding dataset.
pub struct FcDataset {
    inner: EmbeddingDataset,
}

/// The outcome of a finished experiment run.
pub struct FcRun {
    summary: RunSummary,
    run_dir: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FcStatus {
    match err {
        Error::InvalidInput(_) => FcStatus::InvalidArgument,
        Error::Config(_) => FcStatus::Config,
        Error::Format { .. } | Error::Truncated { .. } => FcStatus::Format,
        Error::Path { .. } | Error::Io(_) => FcStatus::Io,
        Error::Divergence(_) => FcStatus::Divergence,
        Error::SingularCovariance | Error::DegenerateRow { .. } | Error::AllSamplesDiscarded => FcStatus::Numerical,
    }
}

struct Failure(FcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(FcStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records its error and turns panics into [`FcStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            FcStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Failure> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("{what} must have at least one row and column")));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid(format!("{what} is too large")))?;
    Ok(Matrix::from_vec(rows, cols, slice(p, len, what)?.to_vec())?)
}

unsafe fn labels(p: *const u32, n: usize, what: &str) -> Result<Vec<usize>, Failure> {
    Ok(slice(p, n, what)?.iter().map(|&v| v as usize).collect())
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next `fc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset file (`.fstc` binary or `.csv`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_ds` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fc_dataset_load(path: *const c_char, out_ds: *mut *mut FcDataset) -> FcStatus {
    guard(|| {
        let path = Path::new(string(path, "path")?);
        let slot = out(out_ds, "out_ds")?;
        let inner = load_dataset(path, DatasetFormat::from_path(path))?;
        *slot = Box::into_raw(Box::new(FcDataset { inner }));
        Ok(())
    })
}

/// Builds a dataset from an `n × d` matrix. `labels_in` may be null.
///
/// # Safety
/// `x` must hold `n * d` values, `labels_in` (if non-null) `n` values.
#[no_mangle]
pub unsafe extern "C" fn fc_dataset_new(
    x: *const f64,
    n: usize,
    d: usize,
    labels_in: *const u32,
    out_ds: *mut *mut FcDataset,
) -> FcStatus {
    guard(|| {
        let slot = out(out_ds, "out_ds")?;
        let x = matrix(x, n, d, "x")?;
        let y = if labels_in.is_null() {
            None
        } else {
            Some(labels(labels_in, n, "labels")?)
        };
        let inner = EmbeddingDataset::new(x, y, "ffi")?;
        *slot = Box::into_raw(Box::new(FcDataset { inner }));
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fc_dataset_rows(ds: *const FcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n())
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fc_dataset_dim(ds: *const FcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.d())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fc_dataset_free(ds: *mut FcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Balanced soft pseudo-labels for an `n × k` score matrix. `q_out`
/// receives the square-normalized labels and `xi_out` (optional) the
/// transport plan. `converged` (optional) is set to 1 or 0.
///
/// # Safety
/// `scores`, `q_out` and a non-null `xi_out` must hold `n * k` values.
#[no_mangle]
pub unsafe extern "C" fn fc_pseudo_labels(
    scores: *const f64,
    n: usize,
    k: usize,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
    q_out: *mut f64,
    xi_out: *mut f64,
    converged: *mut i32,
) -> FcStatus {
    guard(|| {
        let scores = matrix(scores, n, k, "scores")?;
        let q_dst = slice_mut(q_out, n * k, "q_out")?;
        let cfg = TransportConfig {
            epsilon,
            max_iters,
            marginal_tol: tol,
        };
        let batch = generate_pseudo_labels(&scores, &cfg)?;
        q_dst.copy_from_slice(batch.q.as_slice());
        if !xi_out.is_null() {
            slice_mut(xi_out, n * k, "xi_out")?.copy_from_slice(batch.xi.as_slice());
        }
        if let Some(c) = converged.as_mut() {
            *c = i32::from(batch.converged);
        }
        Ok(())
    })
}

/// Fits the two-component residual mixture for `tau` EM sweeps and writes
/// the sample weights (0 for discarded samples) to `w_out`.
///
/// # Safety
/// `q` and `o` must hold `n * k` values, `w_out` `n` values.
#[no_mangle]
pub unsafe extern "C" fn fc_sample_weights(
    q: *const f64,
    o: *const f64,
    n: usize,
    k: usize,
    tau: usize,
    w_out: *mut f64,
) -> FcStatus {
    guard(|| {
        let q = matrix(q, n, k, "q")?;
        let o = matrix(o, n, k, "o")?;
        let dst = slice_mut(w_out, n, "w_out")?;
        let cfg = GumConfig {
            tau,
            ..GumConfig::default()
        };
        let (w, _) = fit(&q, &o, &vec![1.0; n], &cfg)?;
        dst.copy_from_slice(&w.w);
        Ok(())
    })
}

/// Clustering accuracy under the best one-to-one relabeling.
///
/// # Safety
/// `y` and `y_hat` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn fc_accuracy(y: *const u32, y_hat: *const u32, n: usize, k: usize, acc: *mut f64) -> FcStatus {
    guard(|| {
        let slot = out(acc, "acc")?;
        *slot = accuracy(&labels(y, n, "y")?, &labels(y_hat, n, "y_hat")?, k)?;
        Ok(())
    })
}

/// Normalized mutual information (geometric-mean normalization).
///
/// # Safety
/// `y` and `y_hat` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn fc_nmi(y: *const u32, y_hat: *const u32, n: usize, value: *mut f64) -> FcStatus {
    guard(|| {
        let slot = out(value, "value")?;
        *slot = nmi(&labels(y, n, "y")?, &labels(y_hat, n, "y_hat")?)?;
        Ok(())
    })
}

/// k-means with `restarts` seeded restarts, keeping the lowest inertia.
/// Writes one cluster id per row to `assignments`.
///
/// # Safety
/// `ds` must be a live handle, `assignments` must hold one value per row.
#[no_mangle]
pub unsafe extern "C" fn fc_kmeans(
    ds: *const FcDataset,
    k: usize,
    seed: u64,
    restarts: usize,
    assignments: *mut u32,
    inertia: *mut f64,
) -> FcStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| invalid("ds is null"))?;
        let dst = slice_mut(assignments, ds.inner.n(), "assignments")?;
        let km = kmeans_restarts(&ds.inner.x, k, &mut Rng::new(seed), 100, restarts.max(1))?;
        for (d, &a) in dst.iter_mut().zip(&km.assignments) {
            *d = a as u32;
        }
        if let Some(i) = inertia.as_mut() {
            *i = km.inertia;
        }
        Ok(())
    })
}

/// Runs a full experiment described by a TOML document, writing the usual
/// run directory under its `output_dir`.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out_run` valid.
#[no_mangle]
pub unsafe extern "C" fn fc_run(config_toml: *const c_char, out_run: *mut *mut FcRun) -> FcStatus {
    guard(|| {
        let text = string(config_toml, "config_toml")?;
        let slot = out(out_run, "out_run")?;
        let cfg = ExperimentConfig::from_toml_str(text)?;
        let summary = cmd_run(&cfg)?;
        let run_dir = CString::new(summary.run_dir.to_string_lossy().into_owned())
            .map_err(|_| invalid("run directory contains a NUL byte"))?;
        *slot = Box::into_raw(Box::new(FcRun { summary, run_dir }));
        Ok(())
    })
}

/// Final accuracy of the averaged model. `Unavailable` if the dataset had
/// no labels.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fc_run_accuracy(run: *const FcRun, acc: *mut f64) -> FcStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| invalid("run is null"))?;
        let slot = out(acc, "acc")?;
        *slot = run
            .summary
            .metrics
            .acc
            .ok_or_else(|| Failure(FcStatus::Unavailable, "run has no labels".into()))?;
        Ok(())
    })
}

/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fc_run_nmi(run: *const FcRun, value: *mut f64) -> FcStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| invalid("run is null"))?;
        let slot = out(value, "value")?;
        *slot = run
            .summary
            .metrics
            .nmi
            .ok_or_else(|| Failure(FcStatus::Unavailable, "run has no labels".into()))?;
        Ok(())
    })
}

/// Path of the run directory, owned by the handle. Null for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fc_run_dir(run: *const FcRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.run_dir.as_ptr())
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fc_run_free(run: *mut FcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
