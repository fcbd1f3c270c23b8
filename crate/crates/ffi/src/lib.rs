//! C ABI over `diffnas`.
//!
//! Every function returns a [`DiffnasStatus`]; results come back through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`diffnas_last_error`]. Handles are opaque and must be released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use diffnas::denoiser::ArchitectureConfig;
use diffnas::flops::{self, Scale};
use diffnas::proxy::SearchMemory;
use diffnas::{frechet, rankcorr, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffnasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    RangeViolation = 4,
    /// A numerical routine failed (degenerate input, non-PSD covariance, ...).
    ComputeError = 5,
    IoError = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Values accepted by the `scale` parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffnasScale {
    Desk = 0,
    Cifar = 1,
}

fn scale_arg(v: u32) -> Result<Scale, Fail> {
    match v {
        0 => Ok(Scale::Desk),
        1 => Ok(Scale::Cifar),
        _ => Err(Fail(DiffnasStatus::InvalidArgument, format!("unknown scale {v}"))),
    }
}

/// A parsed, validated architecture.
pub struct DiffnasArch {
    inner: ArchitectureConfig,
}

/// A search memory loaded from a JSONL log.
pub struct DiffnasMemory {
    inner: SearchMemory,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DiffnasStatus {
    match err {
        Error::Parse(_) | Error::Json(_) => DiffnasStatus::ParseError,
        Error::RangeViolation(_) | Error::InvalidRange(_) => DiffnasStatus::RangeViolation,
        Error::Io { .. } => DiffnasStatus::IoError,
        Error::InvalidShape(_)
        | Error::ShapeMismatch { .. }
        | Error::InsufficientSamples { .. }
        | Error::Precondition(_)
        | Error::Config(_) => DiffnasStatus::InvalidArgument,
        _ => DiffnasStatus::ComputeError,
    }
}

struct Fail(DiffnasStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DiffnasStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DiffnasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiffnasStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside diffnas".into());
            DiffnasStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DiffnasStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn diffnas_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn diffnas_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses `text` (compact `base_channel=..,num_blocks=..,mult=a:b:c:d,attn=a:b:c:d`
/// form or a key-value block) into a new handle.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_arch_parse(text: *const c_char, out: *mut *mut DiffnasArch) -> DiffnasStatus {
    guard(|| {
        let s = str_arg(text, "text")?;
        let inner: ArchitectureConfig = if s.contains('\n') {
            ArchitectureConfig::from_block(s)?
        } else {
            s.parse()?
        };
        inner.validate()?;
        write_out(out, Box::into_raw(Box::new(DiffnasArch { inner })), "out")
    })
}

/// # Safety
/// `arch` must come from [`diffnas_arch_parse`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn diffnas_arch_free(arch: *mut DiffnasArch) {
    if !arch.is_null() {
        drop(Box::from_raw(arch));
    }
}

/// Writes the compact form of `arch` into `buf` (NUL-terminated). `needed`
/// receives the full length including the terminator, so a call with
/// `buf_len = 0` queries the size.
///
/// # Safety
/// `arch` must be a live handle; `buf` must hold `buf_len` bytes; `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_arch_to_string(
    arch: *const DiffnasArch,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> DiffnasStatus {
    guard(|| {
        let a = arch.as_ref().ok_or_else(|| null("arch"))?;
        let s = a.inner.to_string();
        write_out(needed, s.len() + 1, "needed")?;
        if buf_len == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        if buf_len < s.len() + 1 {
            return Err(Fail(DiffnasStatus::InvalidArgument, format!("buffer needs {} bytes", s.len() + 1)));
        }
        std::ptr::copy_nonoverlapping(s.as_ptr().cast(), buf, s.len());
        buf.add(s.len()).write(0);
        Ok(())
    })
}

/// Multiply-accumulate estimate of `arch`. `scale` is a [`DiffnasScale`];
/// `length` is the desk signal length and is ignored by the CIFAR estimator.
///
/// # Safety
/// `arch` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_arch_flops(
    arch: *const DiffnasArch,
    scale: u32,
    length: usize,
    out: *mut u64,
) -> DiffnasStatus {
    guard(|| {
        let a = arch.as_ref().ok_or_else(|| null("arch"))?;
        let scale = scale_arg(scale)?;
        let r = flops::estimate(&a.inner, scale, length)?;
        write_out(out, r.total, "out")
    })
}

#[derive(Clone, Copy)]
enum Corr {
    Pearson,
    Spearman,
    Kendall,
}

unsafe fn correlation(kind: Corr, x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DiffnasStatus {
    guard(|| {
        let xs = slice_arg(x, n, "x")?;
        let ys = slice_arg(y, n, "y")?;
        let v = match kind {
            Corr::Pearson => rankcorr::pearson(xs, ys)?,
            Corr::Spearman => rankcorr::spearman(xs, ys)?,
            Corr::Kendall => rankcorr::kendall(xs, ys)?,
        };
        write_out(out, v, "out")
    })
}

/// # Safety
/// `x` and `y` must each hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DiffnasStatus {
    correlation(Corr::Pearson, x, y, n, out)
}

/// # Safety
/// `x` and `y` must each hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DiffnasStatus {
    correlation(Corr::Spearman, x, y, n, out)
}

/// # Safety
/// `x` and `y` must each hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_kendall(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> DiffnasStatus {
    correlation(Corr::Kendall, x, y, n, out)
}

/// Fréchet distance between Gaussian fits of two row-major sample sets of
/// dimension `dim` (`n_a` and `n_b` rows).
///
/// # Safety
/// `a` must hold `n_a * dim` doubles, `b` `n_b * dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_fid(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    out: *mut f64,
) -> DiffnasStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail(DiffnasStatus::InvalidArgument, "dim must be positive".into()));
        }
        let size = |n: usize| {
            n.checked_mul(dim)
                .ok_or_else(|| Fail(DiffnasStatus::InvalidArgument, "sample count overflows".into()))
        };
        let xa = slice_arg(a, size(n_a)?, "a")?;
        let xb = slice_arg(b, size(n_b)?, "b")?;
        let ra: Vec<&[f64]> = xa.chunks_exact(dim).collect();
        let rb: Vec<&[f64]> = xb.chunks_exact(dim).collect();
        write_out(out, frechet::fid_between(&ra, &rb)?, "out")
    })
}

/// Loads a JSONL memory log. `scale` is a [`DiffnasScale`].
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_memory_load(
    path: *const c_char,
    budget: u64,
    scale: u32,
    out: *mut *mut DiffnasMemory,
) -> DiffnasStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let text = std::fs::read_to_string(Path::new(p)).map_err(|e| Error::io(format!("reading {p}"), e))?;
        let scale = scale_arg(scale)?;
        let inner = SearchMemory::from_jsonl(&text, budget, scale)?;
        write_out(out, Box::into_raw(Box::new(DiffnasMemory { inner })), "out")
    })
}

/// # Safety
/// `memory` must come from [`diffnas_memory_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn diffnas_memory_free(memory: *mut DiffnasMemory) {
    if !memory.is_null() {
        drop(Box::from_raw(memory));
    }
}

/// Number of records in the log.
///
/// # Safety
/// `memory` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_memory_len(memory: *const DiffnasMemory, out: *mut usize) -> DiffnasStatus {
    guard(|| {
        let m = memory.as_ref().ok_or_else(|| null("memory"))?;
        write_out(out, m.inner.len(), "out")
    })
}

/// The selected record: its architecture as a new handle, plus its RFID and
/// FLOPs. Fails with `DIFFNAS_STATUS_COMPUTE_ERROR` when nothing was accepted.
///
/// # Safety
/// `memory` must be a live handle; all out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn diffnas_memory_best(
    memory: *const DiffnasMemory,
    arch: *mut *mut DiffnasArch,
    rfid: *mut f64,
    flops: *mut u64,
) -> DiffnasStatus {
    guard(|| {
        let m = memory.as_ref().ok_or_else(|| null("memory"))?;
        if arch.is_null() || rfid.is_null() || flops.is_null() {
            return Err(null("an out pointer"));
        }
        let best = m.inner.best().ok_or(Error::NoAcceptedCandidates)?;
        let a = best.arch.ok_or(Error::NoAcceptedCandidates)?;
        rfid.write(best.rfid);
        flops.write(best.flops.unwrap_or(0));
        arch.write(Box::into_raw(Box::new(DiffnasArch { inner: a })));
        Ok(())
    })
}
