//! C interface to generator inference and the constraint and FID metrics.
//!
//! Every function returns a [`PixganStatus`]; on failure the message is available from
//! [`pixgan_last_error`] on the same thread until the next call. Images are row-major
//! `side × side` arrays of `float` in `[-1, 1]`; a constraint map is a value array plus a
//! byte mask (nonzero = constrained) of the same size. Values at unconstrained pixels must be 0.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use pixgan::checkpoint::load_generator;
use pixgan::constraints::{constraint_mse, constraint_penalty, ConstraintMap};
use pixgan::metrics::{fid, generate_for_maps, selection_score, GaussianStats};
use pixgan::model::Generator;
use pixgan::{Error, ImageGrid};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Checkpoint = 5,
    Parse = 6,
    Numerical = 7,
    UndefinedMetric = 8,
    Internal = 9,
}

/// Opaque generator handle.
pub struct PixganGenerator {
    inner: Generator,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PixganStatus {
    match e {
        Error::InvalidArgument(_) | Error::PartitionTooSmall { .. } => {
            PixganStatus::InvalidArgument
        }
        Error::Dimension(_) | Error::LengthMismatch { .. } => PixganStatus::Dimension,
        Error::Io(_) => PixganStatus::Io,
        Error::Checkpoint { .. } => PixganStatus::Checkpoint,
        Error::Parse { .. } | Error::Format { .. } | Error::Json(_) | Error::Csv(_) => {
            PixganStatus::Parse
        }
        Error::Numerical(_) | Error::NonFiniteLoss { .. } | Error::TrainingFailed { .. } => {
            PixganStatus::Numerical
        }
        Error::UndefinedMetric(_) => PixganStatus::UndefinedMetric,
    }
}

struct Failure(PixganStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PixganStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PixganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PixganStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PixganStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `ptr` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

fn side_area(side: usize) -> Result<usize, Failure> {
    side.checked_mul(side).filter(|&a| a > 0).ok_or_else(|| {
        Failure(
            PixganStatus::InvalidArgument,
            format!("invalid side {side}"),
        )
    })
}

unsafe fn constraint_map(
    values: *const f32,
    mask: *const u8,
    side: usize,
) -> Result<ConstraintMap, Failure> {
    let area = side_area(side)?;
    let v = unsafe { slice(values, area, "values") }?;
    let m = unsafe { slice(mask, area, "mask") }?;
    Ok(ConstraintMap::new(
        side,
        v.to_vec(),
        m.iter().map(|&b| b != 0).collect(),
    )?)
}

unsafe fn image(pixels: *const f32, side: usize) -> Result<ImageGrid, Failure> {
    let area = side_area(side)?;
    Ok(ImageGrid::new(
        side,
        unsafe { slice(pixels, area, "image") }?.to_vec(),
    )?)
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: non-null and, per the contract, valid for writes.
    unsafe { out.write(v) };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a successful call.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pixgan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a generator checkpoint. On success `*out` owns a handle to release with
/// [`pixgan_generator_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pixgan_generator_load(
    path: *const c_char,
    out: *mut *mut PixganGenerator,
) -> PixganStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: non-null, nul-terminated per the contract.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Failure(PixganStatus::InvalidArgument, "path is not UTF-8".into()))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let (g, _) = load_generator(path)?;
        let handle = Box::into_raw(Box::new(PixganGenerator { inner: g }));
        unsafe { write_out(out, handle) }
    })
}

/// # Safety
/// `handle` must come from [`pixgan_generator_load`] and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pixgan_generator_free(handle: *mut PixganGenerator) {
    if !handle.is_null() {
        // SAFETY: created by Box::into_raw in pixgan_generator_load.
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Image side length of a loaded generator, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pixgan_generator_side(handle: *const PixganGenerator) -> usize {
    unsafe { handle.as_ref() }.map_or(0, |h| h.inner.arch.side)
}

/// Generates `count` images conditioned on one constraint map into `out`
/// (`count × side × side` floats), with latent vectors drawn from `seed`.
///
/// # Safety
/// `values`, `mask` must hold `side²` elements and `out` must have room for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn pixgan_generator_generate(
    handle: *const PixganGenerator,
    values: *const f32,
    mask: *const u8,
    side: usize,
    count: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> PixganStatus {
    guard(|| {
        let h = unsafe { handle.as_ref() }.ok_or_else(|| null("generator handle"))?;
        if side != h.inner.arch.side {
            return Err(Failure(
                PixganStatus::Dimension,
                format!("generator produces side {}, got {side}", h.inner.arch.side),
            ));
        }
        if count == 0 {
            return Err(Failure(
                PixganStatus::InvalidArgument,
                "count must be at least 1".into(),
            ));
        }
        let needed = count.saturating_mul(side * side);
        if out_len < needed {
            return Err(Failure(
                PixganStatus::Dimension,
                format!("output holds {out_len} floats, need {needed}"),
            ));
        }
        if out.is_null() {
            return Err(null("output buffer"));
        }
        let map = unsafe { constraint_map(values, mask, side) }?;
        let images = generate_for_maps(&h.inner, std::slice::from_ref(&map), count, seed)?;
        // SAFETY: non-null with room for out_len ≥ needed floats.
        let dst = unsafe { std::slice::from_raw_parts_mut(out, needed) };
        for (chunk, img) in dst.chunks_exact_mut(side * side).zip(&images) {
            chunk.copy_from_slice(img.pixels());
        }
        Ok(())
    })
}

/// Squared masked residual `‖C − M(C)⊙X‖²` of one image.
///
/// # Safety
/// `values`, `mask`, `generated` must hold `side²` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pixgan_constraint_penalty(
    values: *const f32,
    mask: *const u8,
    generated: *const f32,
    side: usize,
    out: *mut f64,
) -> PixganStatus {
    guard(|| {
        let c = unsafe { constraint_map(values, mask, side) }?;
        let g = unsafe { image(generated, side) }?;
        unsafe { write_out(out, constraint_penalty(&c, &g)?) }
    })
}

/// Mean squared error over the constrained pixels; fails for an empty map.
///
/// # Safety
/// As [`pixgan_constraint_penalty`].
#[no_mangle]
pub unsafe extern "C" fn pixgan_constraint_mse(
    values: *const f32,
    mask: *const u8,
    generated: *const f32,
    side: usize,
    out: *mut f64,
) -> PixganStatus {
    guard(|| {
        let c = unsafe { constraint_map(values, mask, side) }?;
        let g = unsafe { image(generated, side) }?;
        unsafe { write_out(out, constraint_mse(&c, &g)?) }
    })
}

/// Fréchet distance between two Gaussians given as means of length `dim` and row-major
/// `dim × dim` covariances.
///
/// # Safety
/// Mean arrays hold `dim` and covariance arrays `dim²` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pixgan_fid(
    mu_r: *const f64,
    sigma_r: *const f64,
    mu_g: *const f64,
    sigma_g: *const f64,
    dim: usize,
    out: *mut f64,
) -> PixganStatus {
    guard(|| {
        if dim == 0 {
            return Err(Failure(
                PixganStatus::InvalidArgument,
                "dim must be positive".into(),
            ));
        }
        let sq = dim
            .checked_mul(dim)
            .ok_or_else(|| Failure(PixganStatus::InvalidArgument, "dim too large".into()))?;
        let r = GaussianStats::from_slices(
            unsafe { slice(mu_r, dim, "mu_r") }?,
            unsafe { slice(sigma_r, sq, "sigma_r") }?,
            0,
        )?;
        let g = GaussianStats::from_slices(
            unsafe { slice(mu_g, dim, "mu_g") }?,
            unsafe { slice(sigma_g, sq, "sigma_g") }?,
            0,
        )?;
        unsafe { write_out(out, fid(&r, &g)?) }
    })
}

/// `sqrt(fid² + mse)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pixgan_selection_score(fid: f64, mse: f64, out: *mut f64) -> PixganStatus {
    guard(|| unsafe { write_out(out, selection_score(fid, mse)?) })
}
