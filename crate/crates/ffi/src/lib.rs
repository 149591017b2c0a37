//! C ABI over `fingerloc`.
//!
//! Every fallible call returns an [`FlStatus`]; on failure the message is
//! available from [`fl_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fingerloc::cascade::CascadeModel;
use fingerloc::channel::{
    compute_fcf, synth_ctf, ChannelRealization, CtfSweep, FrequencyGrid, MultipathComponent,
};
use fingerloc::dataset::Observation;
use fingerloc::{eval, Environment, Error, Point};
use num_complex::Complex64;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    IoError = 4,
    Internal = 5,
    Panic = 6,
}

/// Output of [`fl_cascade_localize`]. `env` indexes [`fl_environment_name`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlLocation {
    pub env: i32,
    pub x_cm: f64,
    pub y_cm: f64,
}

/// A loaded cascade model.
pub struct FlCascade {
    model: CascadeModel,
    max_lag: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => FlStatus::InvalidArgument,
            Error::Data { .. } => FlStatus::DataError,
            Error::Io { .. } => FlStatus::IoError,
            Error::Internal(_) => FlStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside fingerloc");
            FlStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn complex_input(re: *const f64, im: *const f64, n: usize) -> Result<Vec<Complex64>, Failure> {
    let re = slice(re, n, "real part")?;
    let im = slice(im, n, "imaginary part")?;
    Ok(re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of environment `index` (0..=3), or NULL.
#[no_mangle]
pub extern "C" fn fl_environment_name(index: i32) -> *const c_char {
    let name: &'static CStr = match usize::try_from(index).ok().and_then(Environment::from_index) {
        Some(Environment::Lab) => c"Lab",
        Some(Environment::NarrowCorridor) => c"NarrowCorridor",
        Some(Environment::Lobby) => c"Lobby",
        Some(Environment::SportsHall) => c"SportsHall",
        None => return ptr::null(),
    };
    name.as_ptr()
}

/// Loads a model directory written by `fingerloc train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_cascade_load(dir: *const c_char, out: *mut *mut FlCascade) -> FlStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Failure(FlStatus::InvalidArgument, "dir is not UTF-8".into()))?;
        let model = CascadeModel::load(Path::new(dir))?;
        let max_lag = std::iter::once(&model.stage1)
            .chain(model.stage2.values())
            .map(|m| m.repr().max_lag)
            .max()
            .unwrap_or(0);
        *out = Box::into_raw(Box::new(FlCascade { model, max_lag }));
        Ok(())
    })
}

/// Releases a handle from [`fl_cascade_load`]. NULL is ignored.
///
/// # Safety
/// `handle` must come from [`fl_cascade_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fl_cascade_free(handle: *mut FlCascade) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of CTF points the model expects.
///
/// # Safety
/// `handle` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn fl_cascade_points(handle: *const FlCascade) -> usize {
    handle.as_ref().map_or(0, |h| h.model.grid.n_points())
}

/// Localizes one CTF sweep of `n_points` bins. Pass NaN for `rss_db` to
/// derive it from the sweep. FCF is always derived.
///
/// # Safety
/// `ctf_re` and `ctf_im` must point to `n_points` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fl_cascade_localize(
    handle: *const FlCascade,
    ctf_re: *const f64,
    ctf_im: *const f64,
    n_points: usize,
    rss_db: f64,
    out: *mut FlLocation,
) -> FlStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let values = complex_input(ctf_re, ctf_im, n_points)?;
        let ctf = CtfSweep::new(h.model.grid, values)?;
        let mut obs = Observation::from_ctf(ctf, h.max_lag)?;
        if !rss_db.is_nan() {
            obs.rss_db = rss_db;
        }
        let r = h.model.localize(&obs)?;
        *out = FlLocation {
            env: r.predicted_env.index() as i32,
            x_cm: r.position.x,
            y_cm: r.position.y,
        };
        Ok(())
    })
}

/// Percentage RMSE reduction relative to the RSS baseline.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_alpha(rmse_rss: f64, rmse_beta: f64, out: *mut f64) -> FlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = eval::alpha(rmse_rss, rmse_beta)?;
        Ok(())
    })
}

/// RMSE between `n` estimated and true points, both stored as interleaved
/// `x0, y0, x1, y1, ...`.
///
/// # Safety
/// `estimates` and `truths` must point to `2 * n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fl_rmse(
    estimates: *const f64,
    truths: *const f64,
    n: usize,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n
            .checked_mul(2)
            .ok_or_else(|| Failure(FlStatus::InvalidArgument, "n too large".into()))?;
        let pts = |s: &[f64]| s.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect::<Vec<_>>();
        let est = pts(slice(estimates, len, "estimates")?);
        let tru = pts(slice(truths, len, "truths")?);
        *out = eval::rmse(&est, &tru)?;
        Ok(())
    })
}

/// Channel transfer function of `n_paths` components over `n_points`
/// frequencies spanning `span_hz` around `center_hz`.
///
/// # Safety
/// Path arrays must hold `n_paths` doubles, output arrays `n_points`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fl_synth_ctf(
    amplitudes: *const f64,
    delays_s: *const f64,
    phases_rad: *const f64,
    n_paths: usize,
    center_hz: f64,
    span_hz: f64,
    n_points: usize,
    out_re: *mut f64,
    out_im: *mut f64,
) -> FlStatus {
    guard(|| {
        let a = slice(amplitudes, n_paths, "amplitudes")?;
        let d = slice(delays_s, n_paths, "delays")?;
        let p = slice(phases_rad, n_paths, "phases")?;
        let components = (0..n_paths)
            .map(|i| MultipathComponent::new(a[i], d[i], p[i]))
            .collect::<fingerloc::Result<Vec<_>>>()?;
        let grid = FrequencyGrid::new(center_hz, span_hz, n_points)?;
        let ctf = synth_ctf(&ChannelRealization::new(components)?, &grid);
        let re = slice_mut(out_re, n_points, "out_re")?;
        let im = slice_mut(out_im, n_points, "out_im")?;
        for (i, v) in ctf.values().iter().enumerate() {
            re[i] = v.re;
            im[i] = v.im;
        }
        Ok(())
    })
}

/// Frequency coherence of a CTF sweep for lags `0..=max_lag`.
///
/// # Safety
/// Inputs must hold `n_points` doubles, outputs `max_lag + 1`.
#[no_mangle]
pub unsafe extern "C" fn fl_compute_fcf(
    ctf_re: *const f64,
    ctf_im: *const f64,
    n_points: usize,
    max_lag: usize,
    out_re: *mut f64,
    out_im: *mut f64,
) -> FlStatus {
    guard(|| {
        let values = complex_input(ctf_re, ctf_im, n_points)?;
        let d = FrequencyGrid::default();
        let grid = FrequencyGrid::new(d.center_hz(), d.span_hz(), n_points)?;
        let fcf = compute_fcf(&CtfSweep::new(grid, values)?, max_lag)?;
        let re = slice_mut(out_re, max_lag + 1, "out_re")?;
        let im = slice_mut(out_im, max_lag + 1, "out_im")?;
        for (i, v) in fcf.values().iter().enumerate() {
            re[i] = v.re;
            im[i] = v.im;
        }
        Ok(())
    })
}
