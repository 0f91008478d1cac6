//! C ABI over the s2sr library.
//!
//! Every fallible call returns an [`S2srStatus`]; on failure the message is
//! available from [`s2sr_last_error`] on the same thread. Objects cross the
//! boundary as opaque pointers and must be released with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use s2sr::checkpoint::{load_checkpoint, Checkpoint};
use s2sr::generator::super_resolve;
use s2sr::metrics::{evaluate, MetricsOptions, ReportMeta};
use s2sr::raster::{load_band_group, load_scene, save_band_group, BandGroup, RasterFormat, Scene};
use s2sr::Error;

/// Bumped whenever a signature or struct layout in this header changes.
pub const S2SR_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2srStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Panic = 3,
    MissingBand = 10,
    ShapeMismatch = 11,
    CorruptRaster = 12,
    CorruptCheckpoint = 13,
    IoFailure = 14,
    BadFactor = 15,
    ShapeNotDivisible = 16,
    MissingLr60 = 17,
    PatchTooLarge = 18,
    InvalidConfig = 19,
    DomainError = 20,
    ZeroReference = 21,
    AllPixelsDegenerate = 22,
    WindowTooLarge = 23,
    UntrainedParams = 24,
    NonFiniteLoss = 25,
    DataExhausted = 26,
    VersionMismatch = 27,
    JsonError = 28,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2srFormat {
    Geotiff = 0,
    Raw = 1,
}

/// A loaded scene (10 m, 20 m and optional 60 m groups).
pub struct S2srScene {
    inner: Scene,
}

/// A generator restored from a checkpoint.
pub struct S2srModel {
    inner: Checkpoint,
}

/// One band group: a `bands x rows x cols` float raster with band names.
pub struct S2srBandGroup {
    inner: BandGroup,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> S2srStatus {
    use S2srStatus::*;
    match e {
        Error::MissingBand { .. } => MissingBand,
        Error::ShapeMismatch(_) => ShapeMismatch,
        Error::CorruptRaster { .. } => CorruptRaster,
        Error::CorruptCheckpoint { .. } => CorruptCheckpoint,
        Error::Io { .. } => IoFailure,
        Error::BadFactor(_) => BadFactor,
        Error::ShapeNotDivisible { .. } => ShapeNotDivisible,
        Error::MissingLr60 { .. } => MissingLr60,
        Error::PatchTooLarge { .. } => PatchTooLarge,
        Error::InvalidConfig(_) => InvalidConfig,
        Error::DomainError(_) => DomainError,
        Error::ZeroReference => ZeroReference,
        Error::AllPixelsDegenerate => AllPixelsDegenerate,
        Error::WindowTooLarge { .. } => WindowTooLarge,
        Error::UntrainedParams(_) => UntrainedParams,
        Error::NonFiniteLoss { .. } => NonFiniteLoss,
        Error::DataExhausted(_) => DataExhausted,
        Error::VersionMismatch { .. } => VersionMismatch,
        Error::Json { .. } => JsonError,
    }
}

enum Fail {
    Core(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, translating errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> S2srStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            S2srStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(format!("{}: {e}", e.code()));
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("NullPointer: {what} is null"));
            S2srStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(format!("InvalidArgument: {msg}"));
            S2srStatus::InvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("Panic: {msg}"));
            S2srStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

fn check_out<T>(slot: *mut *mut T, what: &'static str) -> Result<(), Fail> {
    if slot.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(())
}

unsafe fn out<T>(slot: *mut *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    check_out(slot, what)?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// ABI version of the loaded library, compare with `S2SR_ABI_VERSION`.
#[no_mangle]
pub extern "C" fn s2sr_abi_version() -> u32 {
    S2SR_ABI_VERSION
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next s2sr call on the same thread.
#[no_mangle]
pub extern "C" fn s2sr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Stable name of a status code, e.g. `"ShapeMismatch"`. Static storage.
#[no_mangle]
pub extern "C" fn s2sr_status_name(status: S2srStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        S2srStatus::Ok => b"Ok\0",
        S2srStatus::NullPointer => b"NullPointer\0",
        S2srStatus::InvalidArgument => b"InvalidArgument\0",
        S2srStatus::Panic => b"Panic\0",
        S2srStatus::MissingBand => b"MissingBand\0",
        S2srStatus::ShapeMismatch => b"ShapeMismatch\0",
        S2srStatus::CorruptRaster => b"CorruptRaster\0",
        S2srStatus::CorruptCheckpoint => b"CorruptCheckpoint\0",
        S2srStatus::IoFailure => b"IoFailure\0",
        S2srStatus::BadFactor => b"BadFactor\0",
        S2srStatus::ShapeNotDivisible => b"ShapeNotDivisible\0",
        S2srStatus::MissingLr60 => b"MissingLr60\0",
        S2srStatus::PatchTooLarge => b"PatchTooLarge\0",
        S2srStatus::InvalidConfig => b"InvalidConfig\0",
        S2srStatus::DomainError => b"DomainError\0",
        S2srStatus::ZeroReference => b"ZeroReference\0",
        S2srStatus::AllPixelsDegenerate => b"AllPixelsDegenerate\0",
        S2srStatus::WindowTooLarge => b"WindowTooLarge\0",
        S2srStatus::UntrainedParams => b"UntrainedParams\0",
        S2srStatus::NonFiniteLoss => b"NonFiniteLoss\0",
        S2srStatus::DataExhausted => b"DataExhausted\0",
        S2srStatus::VersionMismatch => b"VersionMismatch\0",
        S2srStatus::JsonError => b"JsonError\0",
    };
    s.as_ptr().cast()
}

/// Loads a scene from its JSON manifest.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string; `out_scene` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_scene_load(
    manifest_path: *const c_char,
    out_scene: *mut *mut S2srScene,
) -> S2srStatus {
    guard(|| {
        check_out(out_scene, "out_scene")?;
        let path = path_arg(manifest_path, "manifest_path")?;
        let scene = load_scene(&path)?;
        out(out_scene, S2srScene { inner: scene }, "out_scene")
    })
}

/// Rows and columns of the scene's 10 m grid.
///
/// # Safety
/// `scene` must come from `s2sr_scene_load`; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_scene_dims(
    scene: *const S2srScene,
    rows: *mut usize,
    cols: *mut usize,
) -> S2srStatus {
    guard(|| {
        let s = obj(scene, "scene")?;
        if rows.is_null() || cols.is_null() {
            return Err(Fail::Null("rows/cols"));
        }
        (*rows, *cols) = s.inner.hr.dims();
        Ok(())
    })
}

/// # Safety
/// `scene` must come from `s2sr_scene_load` (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn s2sr_scene_free(scene: *mut S2srScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Restores a generator from a checkpoint file.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_model_load(
    checkpoint_path: *const c_char,
    out_model: *mut *mut S2srModel,
) -> S2srStatus {
    guard(|| {
        check_out(out_model, "out_model")?;
        let path = path_arg(checkpoint_path, "checkpoint_path")?;
        let ck = load_checkpoint(&path)?;
        out(out_model, S2srModel { inner: ck }, "out_model")
    })
}

/// Scaling factor of the model: 2 (20 m targets) or 6 (60 m targets).
///
/// # Safety
/// `model` must come from `s2sr_model_load`; `factor` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_model_factor(model: *const S2srModel, factor: *mut u32) -> S2srStatus {
    guard(|| {
        let m = obj(model, "model")?;
        if factor.is_null() {
            return Err(Fail::Null("factor"));
        }
        *factor = m.inner.generator.config.mode.factor() as u32;
        Ok(())
    })
}

/// # Safety
/// `model` must come from `s2sr_model_load` (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn s2sr_model_free(model: *mut S2srModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Super-resolves the model's target group of `scene` onto the 10 m grid.
/// `tile` is the inference tile side in 10 m pixels (0 picks the default).
///
/// # Safety
/// Handles must be live; `out_group` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_super_resolve(
    model: *const S2srModel,
    scene: *const S2srScene,
    tile: usize,
    out_group: *mut *mut S2srBandGroup,
) -> S2srStatus {
    guard(|| {
        check_out(out_group, "out_group")?;
        let m = obj(model, "model")?;
        let s = obj(scene, "scene")?;
        let g = &m.inner.generator;
        let tile = if tile == 0 { s2sr::generator::DEFAULT_TILE } else { tile };
        let sr = super_resolve(g, &s.inner, g.config.mode, tile)?;
        out(out_group, S2srBandGroup { inner: sr }, "out_group")
    })
}

/// Loads a band group from a GeoTIFF (`.tif`) or raw-tensor file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_group` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_band_group_load(
    path: *const c_char,
    out_group: *mut *mut S2srBandGroup,
) -> S2srStatus {
    guard(|| {
        check_out(out_group, "out_group")?;
        let path = path_arg(path, "path")?;
        let g = load_band_group(&path)?;
        out(out_group, S2srBandGroup { inner: g }, "out_group")
    })
}

/// Builds a band group from a band-major `bands x rows x cols` buffer.
///
/// # Safety
/// `band_names` must hold `n_bands` NUL-terminated strings and `data`
/// `n_bands * rows * cols` floats; `out_group` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_band_group_new(
    band_names: *const *const c_char,
    n_bands: usize,
    rows: usize,
    cols: usize,
    data: *const f32,
    gsd_m: f64,
    out_group: *mut *mut S2srBandGroup,
) -> S2srStatus {
    guard(|| {
        check_out(out_group, "out_group")?;
        if band_names.is_null() {
            return Err(Fail::Null("band_names"));
        }
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let len = n_bands
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .ok_or_else(|| Fail::Arg("raster size overflows".into()))?;
        let names = (0..n_bands)
            .map(|i| {
                let p = *band_names.add(i);
                if p.is_null() {
                    return Err(Fail::Null("band name"));
                }
                CStr::from_ptr(p)
                    .to_str()
                    .map(str::to_string)
                    .map_err(|_| Fail::Arg(format!("band name {i} is not valid UTF-8")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pixels = std::slice::from_raw_parts(data, len).to_vec();
        let pixels = ndarray::Array3::from_shape_vec((n_bands, rows, cols), pixels)
            .map_err(|e| Fail::Arg(e.to_string()))?;
        let g = BandGroup::new(names, pixels, gsd_m, None)?;
        out(out_group, S2srBandGroup { inner: g }, "out_group")
    })
}

/// Number of bands, rows and columns.
///
/// # Safety
/// `group` must be live; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_band_group_shape(
    group: *const S2srBandGroup,
    bands: *mut usize,
    rows: *mut usize,
    cols: *mut usize,
) -> S2srStatus {
    guard(|| {
        let g = obj(group, "group")?;
        if bands.is_null() || rows.is_null() || cols.is_null() {
            return Err(Fail::Null("bands/rows/cols"));
        }
        (*bands, *rows, *cols) = g.inner.pixels.dim();
        Ok(())
    })
}

/// Name of band `index` as a newly allocated string; free it with
/// `s2sr_string_free`.
///
/// # Safety
/// `group` must be live; `out_name` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_band_group_band_name(
    group: *const S2srBandGroup,
    index: usize,
    out_name: *mut *mut c_char,
) -> S2srStatus {
    guard(|| {
        let g = obj(group, "group")?;
        if out_name.is_null() {
            return Err(Fail::Null("out_name"));
        }
        let name = g.inner.bands.get(index).ok_or_else(|| {
            Fail::Arg(format!("band index {index} out of range ({} bands)", g.inner.bands.len()))
        })?;
        *out_name = CString::new(name.as_str())
            .map_err(|_| Fail::Arg("band name contains NUL".into()))?
            .into_raw();
        Ok(())
    })
}

/// Copies the pixels, band-major, into `buf` of `len` floats.
///
/// # Safety
/// `buf` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn s2sr_band_group_copy_pixels(
    group: *const S2srBandGroup,
    buf: *mut f32,
    len: usize,
) -> S2srStatus {
    guard(|| {
        let g = obj(group, "group")?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let n = g.inner.pixels.len();
        if len != n {
            return Err(Fail::Arg(format!("buffer holds {len} floats, raster has {n}")));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        dst.iter_mut()
            .zip(g.inner.pixels.iter())
            .for_each(|(d, &s)| *d = s);
        Ok(())
    })
}

/// Writes the group to `path` in the given format.
///
/// # Safety
/// `group` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn s2sr_band_group_save(
    group: *const S2srBandGroup,
    path: *const c_char,
    format: S2srFormat,
) -> S2srStatus {
    guard(|| {
        let g = obj(group, "group")?;
        let path = path_arg(path, "path")?;
        let fmt = match format {
            S2srFormat::Geotiff => RasterFormat::Geotiff,
            S2srFormat::Raw => RasterFormat::Raw,
        };
        save_band_group(&g.inner, &path, fmt)?;
        Ok(())
    })
}

/// # Safety
/// `group` must be live (or null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn s2sr_band_group_free(group: *mut S2srBandGroup) {
    if !group.is_null() {
        drop(Box::from_raw(group));
    }
}

/// Scores `sr` against `gt` (RMSE, SRE, SAM, UIQ) and returns the report as
/// a JSON string; free it with `s2sr_string_free`. `uiq_window` 0 picks the
/// default window.
///
/// # Safety
/// Handles must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2sr_evaluate_json(
    sr: *const S2srBandGroup,
    gt: *const S2srBandGroup,
    uiq_window: usize,
    out_json: *mut *mut c_char,
) -> S2srStatus {
    guard(|| {
        let sr = obj(sr, "sr")?;
        let gt = obj(gt, "gt")?;
        if out_json.is_null() {
            return Err(Fail::Null("out_json"));
        }
        let mut opts = MetricsOptions::default();
        if uiq_window > 0 {
            opts.uiq_window = uiq_window;
        }
        let meta = ReportMeta {
            method: "sr".into(),
            ..ReportMeta::default()
        };
        let report = evaluate(&sr.inner, &gt.inner, &opts, meta)?;
        let text = serde_json::to_string(&report).map_err(|e| Fail::Arg(e.to_string()))?;
        *out_json = CString::new(text)
            .map_err(|_| Fail::Arg("report contains NUL".into()))?
            .into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from an s2sr call (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn s2sr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
