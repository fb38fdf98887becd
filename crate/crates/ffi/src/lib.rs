//! C ABI over `fose`. Configurations are opaque handles; every fallible call
//! returns a [`FoseStatus`] and leaves a message readable with
//! [`fose_last_error`]. Images are dense `f32` arrays in `[N, C, H, W]` order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use ndarray::ArrayView3;

use fose::diffusion::InitNoise;
use fose::pipeline::eval::{fuse, InferenceOptions, Method};
use fose::pipeline::{run_stage, synthesize, FoseConfig, RunOptions};
use fose::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    Panic = 6,
}

/// Noise used to start one-step inference.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoseNoise {
    Zero = 0,
    Random = 1,
}

/// Fusion method for [`fose_fuse`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoseMethod {
    Exp = 0,
    Osd = 1,
    E2e = 2,
    Fose = 3,
}

/// Opaque configuration handle.
pub struct FoseConfigHandle {
    cfg: FoseConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FoseStatus {
    match e {
        Error::Config(_) | Error::Prerequisite { .. } => FoseStatus::Config,
        Error::Io { .. } | Error::MissingComponent { .. } => FoseStatus::Io,
        Error::Dimension(_) | Error::InvalidArgument(_) | Error::Validation(_) | Error::Format { .. } => {
            FoseStatus::InvalidArgument
        }
        Error::NonFinite { .. } | Error::Metric(_) | Error::Tensor(_) => FoseStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FoseStatus, String)>) -> FoseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FoseStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("panic inside fose");
            FoseStatus::Panic
        }
    }
}

fn lift<T>(r: fose::Result<T>) -> Result<T, (FoseStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FoseStatus, String) {
    (FoseStatus::NullPointer, format!("`{what}` is null"))
}

fn bad(msg: impl Into<String>) -> (FoseStatus, String) {
    (FoseStatus::InvalidArgument, msg.into())
}

unsafe fn handle<'a>(h: *const FoseConfigHandle) -> Result<&'a FoseConfigHandle, (FoseStatus, String)> {
    h.as_ref().ok_or_else(|| null("config"))
}

unsafe fn slice<'a>(p: *const f32, n: usize, what: &str) -> Result<&'a [f32], (FoseStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn view(data: &[f32], c: usize, h: usize, w: usize) -> Result<ndarray::Array3<f64>, (FoseStatus, String)> {
    let v = ArrayView3::from_shape((c, h, w), data).map_err(|e| bad(e.to_string()))?;
    Ok(v.mapv(f64::from))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fose_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fose_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Built-in defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn fose_config_default(out: *mut *mut FoseConfigHandle) -> FoseStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = Box::into_raw(Box::new(FoseConfigHandle { cfg: FoseConfig::default() }));
        Ok(())
    })
}

/// Parses a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` as in
/// [`fose_config_default`].
#[no_mangle]
pub unsafe extern "C" fn fose_config_load(path: *const c_char, out: *mut *mut FoseConfigHandle) -> FoseStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| bad("path is not UTF-8"))?;
        let cfg = lift(FoseConfig::load(&PathBuf::from(p)))?;
        *out = Box::into_raw(Box::new(FoseConfigHandle { cfg }));
        Ok(())
    })
}

/// Redirects the data and run roots of a configuration.
///
/// # Safety
/// `cfg` must come from this library; the strings must be NUL-terminated
/// UTF-8 or null to keep the current value.
#[no_mangle]
pub unsafe extern "C" fn fose_config_set_roots(
    cfg: *mut FoseConfigHandle,
    data_root: *const c_char,
    run_root: *const c_char,
) -> FoseStatus {
    guard(|| {
        let h = cfg.as_mut().ok_or_else(|| null("config"))?;
        let read = |p: *const c_char| -> Result<Option<PathBuf>, (FoseStatus, String)> {
            if p.is_null() {
                return Ok(None);
            }
            let s = CStr::from_ptr(p).to_str().map_err(|_| bad("root is not UTF-8"))?;
            Ok(Some(PathBuf::from(s)))
        };
        if let Some(d) = read(data_root)? {
            h.cfg.data.root = d;
        }
        if let Some(r) = read(run_root)? {
            h.cfg.run_root = r;
        }
        Ok(())
    })
}

/// Number of spectral bands of a configuration, or 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn fose_config_bands(cfg: *const FoseConfigHandle) -> usize {
    cfg.as_ref().map_or(0, |h| h.cfg.data.bands)
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `cfg` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fose_config_free(cfg: *mut FoseConfigHandle) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Writes the synthetic train/val/test splits under the data root.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn fose_synthesize(cfg: *const FoseConfigHandle) -> FoseStatus {
    guard(|| {
        lift(synthesize(&handle(cfg)?.cfg))?;
        Ok(())
    })
}

/// Trains one stage (1 to 4).
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn fose_train_stage(cfg: *const FoseConfigHandle, stage: u8, resume: bool) -> FoseStatus {
    guard(|| {
        let h = handle(cfg)?;
        lift(run_stage(&h.cfg, stage, RunOptions { resume, stop_after: None }))?;
        Ok(())
    })
}

/// Fuses `n` images. `lms` and `out` hold `n * bands * h * w` values, `pan`
/// holds `n * h * w`.
///
/// # Safety
/// `cfg` must come from this library and the buffers must have the stated
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn fose_fuse(
    cfg: *const FoseConfigHandle,
    method: FoseMethod,
    noise: FoseNoise,
    seed: u64,
    lms: *const f32,
    pan: *const f32,
    n: usize,
    h: usize,
    w: usize,
    out: *mut f32,
) -> FoseStatus {
    guard(|| {
        let cfg = &handle(cfg)?.cfg;
        let c = cfg.data.bands;
        let len = n * c * h * w;
        let lms = slice(lms, len, "lms")?;
        let pan = slice(pan, n * h * w, "pan")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dev = Device::Cpu;
        let lt = lift(Tensor::from_slice(lms, (n, c, h, w), &dev).map_err(Error::from))?;
        let pt = lift(Tensor::from_slice(pan, (n, 1, h, w), &dev).map_err(Error::from))?;
        let method = match method {
            FoseMethod::Exp => Method::Exp,
            FoseMethod::Osd => Method::Osd,
            FoseMethod::E2e => Method::E2e,
            FoseMethod::Fose => Method::Fose,
        };
        let init_noise = match noise {
            FoseNoise::Zero => InitNoise::Zero,
            FoseNoise::Random => InitNoise::Random,
        };
        let fused = lift(fuse(cfg, method, &lt, &pt, InferenceOptions { init_noise, seed }))?;
        let v = lift(fused.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(Error::from))?;
        if v.len() != len {
            return Err(bad(format!("fused output has {} values, expected {len}", v.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Mean spectral angle in degrees of one `[c, h, w]` image pair.
///
/// # Safety
/// Both buffers must hold `c * h * w` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fose_sam(
    fused: *const f32,
    reference: *const f32,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> FoseStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let f = view(slice(fused, c * h * w, "fused")?, c, h, w)?;
        let r = view(slice(reference, c * h * w, "reference")?, c, h, w)?;
        *out = lift(fose::metrics::sam(f.view(), r.view()))?;
        Ok(())
    })
}

/// ERGAS of one `[c, h, w]` image pair at the given resolution ratio.
///
/// # Safety
/// As for [`fose_sam`].
#[no_mangle]
pub unsafe extern "C" fn fose_ergas(
    fused: *const f32,
    reference: *const f32,
    c: usize,
    h: usize,
    w: usize,
    ratio: usize,
    out: *mut f64,
) -> FoseStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let f = view(slice(fused, c * h * w, "fused")?, c, h, w)?;
        let r = view(slice(reference, c * h * w, "reference")?, c, h, w)?;
        *out = lift(fose::metrics::ergas(f.view(), r.view(), ratio))?;
        Ok(())
    })
}
