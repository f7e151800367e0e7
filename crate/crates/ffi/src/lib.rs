//! C ABI over `stemob`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`StemStatus`]; on failure a message for the calling thread is
//! available from [`stem_last_error`]. Panics never unwind into C.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stemob::attribute::{attribute_loss_ddim, attribute_loss_ddpm, tau, LossModel};
use stemob::codec::save_latent_as_image;
use stemob::container::write_tensor;
use stemob::inversion::{ddpm_invert, stem_preprocess as preprocess, InversionConfig, InversionMethod};
use stemob::pipeline::{load_latent_file, stream_id_for};
use stemob::{Error, Latent, NoiseKey, NoiseSchedule, ScheduleKind};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    ShapeMismatch = 4,
    Io = 5,
    Format = 6,
    Degenerate = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemScheduleKind {
    Linear = 0,
    Cosine = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemMethod {
    Ddpm = 0,
    Ddim = 1,
}

/// Opaque noise schedule.
pub struct StemSchedule(NoiseSchedule);

/// Opaque tensor of `f32` values.
pub struct StemLatent(Latent);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> StemStatus {
    match e {
        Error::StepOutOfRange { .. } | Error::InvalidRange(_) | Error::Domain(_) => StemStatus::OutOfRange,
        Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } => StemStatus::ShapeMismatch,
        Error::Io { .. } => StemStatus::Io,
        Error::UnsupportedFormat(_)
        | Error::Container(_)
        | Error::PngDecode(_)
        | Error::PngEncode(_)
        | Error::Json(_)
        | Error::Manifest(_) => StemStatus::Format,
        Error::Degenerate(_) | Error::Empty(_) => StemStatus::Degenerate,
        _ => StemStatus::InvalidArgument,
    }
}

/// Runs `f`, recording failures and containing panics.
fn guard(f: impl FnOnce() -> Result<(), (StemStatus, String)>) -> StemStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StemStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            StemStatus::Panic
        }
    }
}

fn lib(e: Error) -> (StemStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (StemStatus, String) {
    (StemStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (StemStatus, String)> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, (StemStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (StemStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (StemStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn stem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Schedule of `steps` steps with default parameters for `kind`.
#[no_mangle]
pub unsafe extern "C" fn stem_schedule_new(
    kind: StemScheduleKind,
    steps: usize,
    out: *mut *mut StemSchedule,
) -> StemStatus {
    guard(|| {
        let kind = match kind {
            StemScheduleKind::Linear => ScheduleKind::Linear,
            StemScheduleKind::Cosine => ScheduleKind::Cosine,
        };
        let s = NoiseSchedule::with_defaults(kind, steps).map_err(lib)?;
        unsafe { put(out, StemSchedule(s)) }
    })
}

#[no_mangle]
pub unsafe extern "C" fn stem_schedule_free(schedule: *mut StemSchedule) {
    if !schedule.is_null() {
        drop(unsafe { Box::from_raw(schedule) });
    }
}

/// Number of steps, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn stem_schedule_steps(schedule: *const StemSchedule) -> usize {
    unsafe { schedule.as_ref() }.map_or(0, |s| s.0.steps())
}

/// Cumulative signal fraction at step `t` in `0..=steps`.
#[no_mangle]
pub unsafe extern "C" fn stem_schedule_alpha_bar(
    schedule: *const StemSchedule,
    t: usize,
    out: *mut f64,
) -> StemStatus {
    guard(|| {
        let s = unsafe { deref(schedule, "schedule")? };
        if out.is_null() {
            return Err(null("output pointer"));
        }
        unsafe { *out = s.0.alpha_bar_at(t).map_err(lib)? };
        Ok(())
    })
}

/// Copies `prod(shape)` values from `data` into a new latent.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_new(
    shape: *const usize,
    ndim: usize,
    data: *const f32,
    out: *mut *mut StemLatent,
) -> StemStatus {
    guard(|| {
        if shape.is_null() && ndim > 0 {
            return Err(null("shape"));
        }
        let shape = if ndim == 0 {
            Vec::new()
        } else {
            unsafe { std::slice::from_raw_parts(shape, ndim) }.to_vec()
        };
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or((StemStatus::InvalidArgument, "shape overflows".into()))?;
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let values = if len == 0 {
            Vec::new()
        } else {
            unsafe { std::slice::from_raw_parts(data, len) }.to_vec()
        };
        let x = Latent::new(shape, values).map_err(lib)?;
        unsafe { put(out, StemLatent(x)) }
    })
}

#[no_mangle]
pub unsafe extern "C" fn stem_latent_free(latent: *mut StemLatent) {
    if !latent.is_null() {
        drop(unsafe { Box::from_raw(latent) });
    }
}

/// Number of values, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_len(latent: *const StemLatent) -> usize {
    unsafe { latent.as_ref() }.map_or(0, |x| x.0.len())
}

/// Number of dimensions, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_ndim(latent: *const StemLatent) -> usize {
    unsafe { latent.as_ref() }.map_or(0, |x| x.0.shape().len())
}

/// Writes the shape into `out`, which must hold `capacity >= ndim` entries.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_shape(
    latent: *const StemLatent,
    out: *mut usize,
    capacity: usize,
) -> StemStatus {
    guard(|| {
        let x = unsafe { deref(latent, "latent")? };
        let shape = x.0.shape();
        if capacity < shape.len() {
            return Err((
                StemStatus::ShapeMismatch,
                format!("shape needs {} entries, capacity is {capacity}", shape.len()),
            ));
        }
        if out.is_null() && !shape.is_empty() {
            return Err(null("output pointer"));
        }
        if !shape.is_empty() {
            unsafe { ptr::copy_nonoverlapping(shape.as_ptr(), out, shape.len()) };
        }
        Ok(())
    })
}

/// Borrowed pointer to the values, valid while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_data(latent: *const StemLatent) -> *const f32 {
    unsafe { latent.as_ref() }.map_or(ptr::null(), |x| x.0.data().as_ptr())
}

/// Loads a `.png` (RGB8, mapped to `[-1, 1]`) or `.stem` tensor file.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_load(path: *const c_char, out: *mut *mut StemLatent) -> StemStatus {
    guard(|| {
        let p = unsafe { path_arg(path)? };
        let x = load_latent_file(p).map_err(lib)?;
        unsafe { put(out, StemLatent(x)) }
    })
}

/// Saves a `3 x H x W` latent as an RGB8 PNG, clamping to `[-1, 1]`.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_save_png(latent: *const StemLatent, path: *const c_char) -> StemStatus {
    guard(|| {
        let x = unsafe { deref(latent, "latent")? };
        let p = unsafe { path_arg(path)? };
        save_latent_as_image(&x.0, p).map_err(lib)
    })
}

/// Writes a lossless `.stem` tensor file.
#[no_mangle]
pub unsafe extern "C" fn stem_latent_write_tensor(latent: *const StemLatent, path: *const c_char) -> StemStatus {
    guard(|| {
        let x = unsafe { deref(latent, "latent")? };
        let p = unsafe { path_arg(path)? };
        write_tensor(&x.0, p).map_err(lib)
    })
}

/// Single-shot DDPM inversion of `x` to step `t`.
#[no_mangle]
pub unsafe extern "C" fn stem_ddpm_invert(
    x: *const StemLatent,
    schedule: *const StemSchedule,
    t: usize,
    seed: u64,
    stream_id: u64,
    out: *mut *mut StemLatent,
) -> StemStatus {
    guard(|| {
        let x = unsafe { deref(x, "latent")? };
        let s = unsafe { deref(schedule, "schedule")? };
        let y = ddpm_invert(&x.0, &s.0, t, NoiseKey::new(seed, stream_id, 0)).map_err(lib)?;
        unsafe { put(out, StemLatent(y)) }
    })
}

/// Partial inversion with `t_stop` of the schedule's steps, using the
/// default DDIM predictor for [`StemMethod::Ddim`].
#[no_mangle]
pub unsafe extern "C" fn stem_preprocess(
    x: *const StemLatent,
    schedule: *const StemSchedule,
    method: StemMethod,
    t_stop: usize,
    seed: u64,
    stream_id: u64,
    out: *mut *mut StemLatent,
) -> StemStatus {
    guard(|| {
        let x = unsafe { deref(x, "latent")? };
        let s = unsafe { deref(schedule, "schedule")? };
        let config = InversionConfig {
            method: match method {
                StemMethod::Ddpm => InversionMethod::Ddpm,
                StemMethod::Ddim => InversionMethod::Ddim,
            },
            t_stop,
            total_steps: s.0.steps(),
            seed,
            ..Default::default()
        };
        let y = preprocess(&x.0, &config, &s.0, stream_id).map_err(lib)?;
        unsafe { put(out, StemLatent(y)) }
    })
}

/// Attribute loss between `x` and `y` at step `t` under the noise model of `method`.
#[no_mangle]
pub unsafe extern "C" fn stem_attribute_loss(
    x: *const StemLatent,
    y: *const StemLatent,
    schedule: *const StemSchedule,
    method: StemMethod,
    t: usize,
    out: *mut f64,
) -> StemStatus {
    guard(|| {
        let x = unsafe { deref(x, "x")? };
        let y = unsafe { deref(y, "y")? };
        let s = unsafe { deref(schedule, "schedule")? };
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let v = match method {
            StemMethod::Ddpm => attribute_loss_ddpm(&x.0, &y.0, &s.0, t),
            StemMethod::Ddim => attribute_loss_ddim(&x.0, &y.0, &s.0, t),
        }
        .map_err(lib)?;
        unsafe { *out = v };
        Ok(())
    })
}

/// First step whose attribute loss exceeds `rho`; writes 0 when none does.
#[no_mangle]
pub unsafe extern "C" fn stem_tau(
    x: *const StemLatent,
    y: *const StemLatent,
    schedule: *const StemSchedule,
    method: StemMethod,
    rho: f64,
    out: *mut usize,
) -> StemStatus {
    guard(|| {
        let x = unsafe { deref(x, "x")? };
        let y = unsafe { deref(y, "y")? };
        let s = unsafe { deref(schedule, "schedule")? };
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let model = match method {
            StemMethod::Ddpm => LossModel::Ddpm,
            StemMethod::Ddim => LossModel::Ddim,
        };
        let t = tau(&x.0, &y.0, &s.0, rho, model).map_err(lib)?;
        unsafe { *out = t.unwrap_or(0) };
        Ok(())
    })
}

/// Stream id the batch pipeline derives from a record id.
#[no_mangle]
pub unsafe extern "C" fn stem_stream_id(record_id: *const c_char) -> u64 {
    if record_id.is_null() {
        return stream_id_for("");
    }
    stream_id_for(&unsafe { CStr::from_ptr(record_id) }.to_string_lossy())
}
