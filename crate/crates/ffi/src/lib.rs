//! C ABI over the diffgo codec.
//!
//! Handles are opaque heap objects released with their `*_free` function.
//! Every call returns a [`DgStatus`]; on failure the thread-local message
//! from [`dg_last_error_message`] describes it. Buffers are caller-owned:
//! functions taking `out` and `out_len` fail with
//! `DG_STATUS_BUFFER_TOO_SMALL` when `out_len` is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use diffgo::diffusion::{DenoiserParams, Schedule};
use diffgo::noise_codec::{project_exact, project_gd, reconstruct, GdConfig, SeedBasis, WeightVector};
use diffgo::numerics::gaussian_stream;
use diffgo::protocol::{decode_message, encode_message, receive_pipeline, DiffGoMessage};
use diffgo::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    BasisMismatch = 4,
    CorruptMessage = 5,
    MalformedMessage = 6,
    UnsupportedFormat = 7,
    Numerical = 8,
    Checkpoint = 9,
    Io = 10,
    Panic = 11,
}

/// Linear beta schedule parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DgSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Shared seed basis.
pub struct DgBasis {
    inner: SeedBasis,
}

/// Trained noise predictor.
pub struct DgModel {
    inner: DenoiserParams,
}

/// Decoded wire message.
pub struct DgMessage {
    inner: DiffGoMessage,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> DgStatus {
    match e {
        Error::InvalidArgument(_) => DgStatus::InvalidArgument,
        Error::BasisMismatch { .. } => DgStatus::BasisMismatch,
        Error::CorruptMessage { .. } => DgStatus::CorruptMessage,
        Error::MalformedMessage(_) | Error::FrameTooLarge(_) | Error::TruncatedFrame => DgStatus::MalformedMessage,
        Error::UnsupportedFormat(_) => DgStatus::UnsupportedFormat,
        Error::SingularMatrix { .. }
        | Error::NotPsd { .. }
        | Error::DegenerateBasis
        | Error::Convergence { .. }
        | Error::InsufficientData { .. } => DgStatus::Numerical,
        Error::Checkpoint(_) | Error::Json(_) => DgStatus::Checkpoint,
        Error::Io(_) | Error::Closed => DgStatus::Io,
    }
}

struct Failure(DgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DgStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            DgStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(DgStatus::NullPointer, format!("{name} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

fn copy_out(src: &[f32], out: &mut [f32]) -> Result<(), Failure> {
    if out.len() < src.len() {
        return Err(Failure(
            DgStatus::BufferTooSmall,
            format!("output holds {} values, {} needed", out.len(), src.len()),
        ));
    }
    out[..src.len()].copy_from_slice(src);
    Ok(())
}

fn schedule_of(s: &DgSchedule) -> Result<Schedule, Failure> {
    Ok(Schedule::linear(s.steps, s.beta_start, s.beta_end)?)
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn dg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default linear schedule.
#[no_mangle]
pub extern "C" fn dg_schedule_default() -> DgSchedule {
    DgSchedule {
        steps: diffgo::diffusion::DEFAULT_STEPS,
        beta_start: diffgo::diffusion::DEFAULT_BETA_START,
        beta_end: diffgo::diffusion::DEFAULT_BETA_END,
    }
}

/// Writes `count` standard normals for `seed` into `out`.
///
/// # Safety
/// `out` must point to `count` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dg_gaussian_stream(seed: u64, out: *mut f32, count: usize) -> DgStatus {
    guard(|| {
        let out = slice_mut(out, count, "out")?;
        out.copy_from_slice(&gaussian_stream(seed, count)?);
        Ok(())
    })
}

/// Builds a basis from `n` distinct seeds.
///
/// # Safety
/// `seeds` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_basis_new(seeds: *const u64, n: usize, dim: usize, out: *mut *mut DgBasis) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let seeds = slice(seeds, n, "seeds")?;
        let inner = SeedBasis::build(seeds, dim)?;
        *out = Box::into_raw(Box::new(DgBasis { inner }));
        Ok(())
    })
}

/// # Safety
/// `basis` must come from [`dg_basis_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_basis_free(basis: *mut DgBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// # Safety
/// `basis` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dg_basis_fingerprint(basis: *const DgBasis, out: *mut u64) -> DgStatus {
    guard(|| {
        let b = handle(basis, "basis")?;
        *out.as_mut().ok_or_else(|| null("out"))? = b.inner.fingerprint();
        Ok(())
    })
}

/// Number of basis vectors and their dimension.
///
/// # Safety
/// `basis` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_basis_shape(basis: *const DgBasis, n: *mut usize, dim: *mut usize) -> DgStatus {
    guard(|| {
        let b = handle(basis, "basis")?;
        *n.as_mut().ok_or_else(|| null("n"))? = b.inner.len();
        *dim.as_mut().ok_or_else(|| null("dim"))? = b.inner.dim();
        Ok(())
    })
}

/// Least-squares weights of `x` (length `dim`) into `out` (length `n`).
/// `use_gd` selects gradient descent over the normal equations.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dg_project(
    basis: *const DgBasis,
    x: *const f32,
    x_len: usize,
    use_gd: bool,
    out: *mut f32,
    out_len: usize,
) -> DgStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.inner;
        let x = slice(x, x_len, "x")?;
        let w = if use_gd {
            project_gd(x, b, &GdConfig::default())?
        } else {
            project_exact(x, b)?
        };
        copy_out(&w.to_dense(), slice_mut(out, out_len, "out")?)
    })
}

/// `sum_i values[i] * N_{indices[i]}` into `out` (length `dim`). Indices
/// must be strictly increasing.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dg_reconstruct(
    basis: *const DgBasis,
    indices: *const u32,
    values: *const f32,
    k: usize,
    out: *mut f32,
    out_len: usize,
) -> DgStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.inner;
        let idx = slice(indices, k, "indices")?;
        let vals = slice(values, k, "values")?;
        let w = WeightVector::from_entries(b.len(), idx.iter().copied().zip(vals.iter().copied()).collect())?;
        copy_out(&reconstruct(&w, b)?, slice_mut(out, out_len, "out")?)
    })
}

/// Loads a model checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_model_from_bytes(bytes: *const u8, len: usize, out: *mut *mut DgModel) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = DenoiserParams::from_checkpoint_bytes(slice(bytes, len, "bytes")?)?;
        *out = Box::into_raw(Box::new(DgModel { inner }));
        Ok(())
    })
}

/// Loads a model checkpoint from a file path.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_model_load(path: *const c_char, out: *mut *mut DgModel) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(DgStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let file = std::fs::File::open(path).map_err(|e| Failure(DgStatus::Io, format!("{path}: {e}")))?;
        let inner = DenoiserParams::read_checkpoint(std::io::BufReader::new(file))?;
        *out = Box::into_raw(Box::new(DgModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from a `dg_model_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_model_free(model: *mut DgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Decodes one wire message.
///
/// # Safety
/// `bytes` must point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_message_decode(bytes: *const u8, len: usize, out: *mut *mut DgMessage) -> DgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = decode_message(slice(bytes, len, "bytes")?)?;
        *out = Box::into_raw(Box::new(DgMessage { inner }));
        Ok(())
    })
}

/// Re-encodes a message. With `out` null, only `written` is set to the
/// required size.
///
/// # Safety
/// `message` must be a live handle; `out` valid for `cap` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn dg_message_encode(
    message: *const DgMessage,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> DgStatus {
    guard(|| {
        let bytes = encode_message(&handle(message, "message")?.inner);
        *written.as_mut().ok_or_else(|| null("written"))? = bytes.len();
        if out.is_null() {
            return Ok(());
        }
        if cap < bytes.len() {
            return Err(Failure(
                DgStatus::BufferTooSmall,
                format!("buffer holds {cap} bytes, {} needed", bytes.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, bytes.len()).copy_from_slice(&bytes);
        Ok(())
    })
}

/// Basis fingerprint, nonzero weight count and image size of a message.
///
/// # Safety
/// `message` must be a live handle; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn dg_message_info(
    message: *const DgMessage,
    fingerprint: *mut u64,
    k_used: *mut usize,
    pixels: *mut usize,
) -> DgStatus {
    guard(|| {
        let m = &handle(message, "message")?.inner;
        if let Some(f) = fingerprint.as_mut() {
            *f = m.basis_fingerprint;
        }
        if let Some(k) = k_used.as_mut() {
            *k = m.k_used();
        }
        if let Some(p) = pixels.as_mut() {
            *p = m.conditions.pixels();
        }
        Ok(())
    })
}

/// # Safety
/// `message` must come from [`dg_message_decode`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dg_message_free(message: *mut DgMessage) {
    if !message.is_null() {
        drop(Box::from_raw(message));
    }
}

/// Regenerates the transmitter's image from a decoded message into `out`.
///
/// # Safety
/// Handles must be live; `out` must be valid for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn dg_receive(
    message: *const DgMessage,
    model: *const DgModel,
    basis: *const DgBasis,
    schedule: DgSchedule,
    out: *mut f32,
    out_len: usize,
) -> DgStatus {
    guard(|| {
        let msg = &handle(message, "message")?.inner;
        let model = &handle(model, "model")?.inner;
        let basis = &handle(basis, "basis")?.inner;
        let image = receive_pipeline(msg, model, basis, &schedule_of(&schedule)?)?;
        copy_out(&image, slice_mut(out, out_len, "out")?)
    })
}
