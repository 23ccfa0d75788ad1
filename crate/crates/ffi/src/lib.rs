//! C interface to `fedpp`.
//!
//! Every function returns a [`FedppStatus`]. On failure the message is
//! available from [`fedpp_last_error_message`] on the same thread until the
//! next call. Handles are opaque; each `*_free` accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedpp::aggregation::{aggregate, AggregationMethod};
use fedpp::cli::ModelFile;
use fedpp::client::intensity;
use fedpp::numeric::{kl_diag, pg_mean, DiagGaussian};
use fedpp::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedppStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Io = 5,
    VersionMismatch = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Diagonal Gaussian over a parameter vector.
pub struct FedppGaussian {
    inner: DiagGaussian,
}

/// A trained model loaded from a model file.
pub struct FedppModel {
    inner: ModelFile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FedppStatus {
    match e {
        Error::DimensionMismatch { .. } => FedppStatus::DimensionMismatch,
        Error::NotPositiveDefinite { .. } | Error::NonFinite { .. } => FedppStatus::Numerical,
        Error::VersionMismatch { .. } => FedppStatus::VersionMismatch,
        Error::Io(_) => FedppStatus::Io,
        Error::Client { source, .. } | Error::Round { source, .. } => status_of(source),
        _ => FedppStatus::InvalidArgument,
    }
}

fn fail(status: FedppStatus, msg: impl Into<String>) -> FedppStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), FedppStatus>) -> FedppStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedppStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(FedppStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: fedpp::Result<T>) -> Result<T, FedppStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], FedppStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(FedppStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FedppStatus> {
    if p.is_null() {
        return Err(fail(FedppStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FedppStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), FedppStatus> {
    if p.is_null() {
        return Err(fail(FedppStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), FedppStatus> {
    if len < src.len() {
        return Err(fail(
            FedppStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", src.len()),
        ));
    }
    out_ptr(out, "out")?;
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

/// Last error message on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn fedpp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parameter packing version, a static string.
#[no_mangle]
pub extern "C" fn fedpp_packing_version() -> *const c_char {
    static V: &CStr = c"dk-tanh-v1";
    V.as_ptr()
}

/// Creates a Gaussian from `dim` means and positive variances.
///
/// # Safety
/// `mean` and `var` must point to `dim` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_gaussian_new(
    mean: *const f64,
    var: *const f64,
    dim: usize,
    out: *mut *mut FedppGaussian,
) -> FedppStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let m = slice(mean, dim, "mean")?.to_vec();
        let v = slice(var, dim, "var")?.to_vec();
        let inner = lift(DiagGaussian::new(m, v))?;
        *out = Box::into_raw(Box::new(FedppGaussian { inner }));
        Ok(())
    })
}

/// # Safety
/// `g` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn fedpp_gaussian_free(g: *mut FedppGaussian) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// `g` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_gaussian_dim(g: *const FedppGaussian, out: *mut usize) -> FedppStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "gaussian is null"))?;
        out_ptr(out, "out")?;
        *out = g.inner.dim();
        Ok(())
    })
}

/// Copies the means into `out`, which holds `len` doubles.
///
/// # Safety
/// `g` must be a live handle; `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fedpp_gaussian_mean(g: *const FedppGaussian, out: *mut f64, len: usize) -> FedppStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "gaussian is null"))?;
        copy_out(g.inner.mean(), out, len)
    })
}

/// Copies the variances into `out`, which holds `len` doubles.
///
/// # Safety
/// As for [`fedpp_gaussian_mean`].
#[no_mangle]
pub unsafe extern "C" fn fedpp_gaussian_var(g: *const FedppGaussian, out: *mut f64, len: usize) -> FedppStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "gaussian is null"))?;
        copy_out(g.inner.var(), out, len)
    })
}

/// `KL(q || p)`.
///
/// # Safety
/// `q`, `p` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_kl(q: *const FedppGaussian, p: *const FedppGaussian, out: *mut f64) -> FedppStatus {
    guard(|| {
        let q = q.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "q is null"))?;
        let p = p.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "p is null"))?;
        out_ptr(out, "out")?;
        *out = lift(kl_diag(&q.inner, &p.inner))?;
        Ok(())
    })
}

/// Pólya-Gamma mean `E[PG(1, c)]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_pg_mean(c: f64, out: *mut f64) -> FedppStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = lift(pg_mean(c))?;
        Ok(())
    })
}

/// Aggregates `n` client Gaussians with `method` (`fedavg`, `kl`, `w2` or
/// `mmd`) into a new handle.
///
/// # Safety
/// `clients` must point to `n` live handles; `method` must be a
/// NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_aggregate(
    clients: *const *const FedppGaussian,
    n: usize,
    method: *const c_char,
    out: *mut *mut FedppGaussian,
) -> FedppStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let method = lift(AggregationMethod::from_name(str_arg(method, "method")?))?;
        if clients.is_null() && n > 0 {
            return Err(fail(FedppStatus::NullPointer, "clients is null"));
        }
        let handles = if n == 0 { &[][..] } else { std::slice::from_raw_parts(clients, n) };
        let mut phis = Vec::with_capacity(n);
        for (i, h) in handles.iter().enumerate() {
            let g = h.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, format!("client {i} is null")))?;
            phis.push(g.inner.clone());
        }
        let inner = lift(aggregate(&phis, &method))?;
        *out = Box::into_raw(Box::new(FedppGaussian { inner }));
        Ok(())
    })
}

/// Loads a model file written by `fedpp train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_model_load(path: *const c_char, out: *mut *mut FedppModel) -> FedppStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let inner = lift(ModelFile::load(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(FedppModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn fedpp_model_free(m: *mut FedppModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_model_num_clients(m: *const FedppModel, out: *mut usize) -> FedppStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "model is null"))?;
        out_ptr(out, "out")?;
        *out = m.inner.clients.len();
        Ok(())
    })
}

/// Copies the global prior into a new handle.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedpp_model_theta(m: *const FedppModel, out: *mut *mut FedppGaussian) -> FedppStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "model is null"))?;
        out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(FedppGaussian { inner: m.inner.server.theta.clone() }));
        Ok(())
    })
}

/// Predictive intensity of client `client` at `n` times, written to `out`.
///
/// # Safety
/// `m` must be a live handle; `times` and `out` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn fedpp_model_intensity(
    m: *const FedppModel,
    client: usize,
    times: *const f64,
    n: usize,
    out: *mut f64,
) -> FedppStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| fail(FedppStatus::NullPointer, "model is null"))?;
        let state = m.inner.clients.get(client).ok_or_else(|| {
            fail(
                FedppStatus::InvalidArgument,
                format!("client {client} out of range ({} clients)", m.inner.clients.len()),
            )
        })?;
        let t = slice(times, n, "times")?;
        let est = lift(intensity(state, t))?;
        copy_out(&est.lambda, out, n)
    })
}
