//! C ABI over the depthhint toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `dh_render_*` and released with the matching `*_free`. Every fallible
//! call returns a [`DhStatus`]; on failure the message is available from
//! [`dh_last_error`] on the same thread until the next failing call.
//!
//! Handles are not synchronized. Sharing one handle across threads is fine
//! for the read-only calls here; freeing it while another thread uses it is not.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use depthhint::harness::predict;
use depthhint::hints::{render_features, render_features_from_table, render_scalar, Rendered, ScalarSource};
use depthhint::losses::{eigen_metrics, silog, SilogForm};
use depthhint::{BinningSpec, DepthFrame, EmbeddingStore, Error, HintPlane, LookupTable, MlpParameters, Mode};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad argument value, including non-UTF-8 strings.
    InvalidArgument = 2,
    Io = 3,
    /// File exists but could not be parsed.
    Format = 4,
    DimMismatch = 5,
    /// Label missing and no `background` entry.
    UnknownLabel = 6,
    /// Non-finite loss, gradient or prediction.
    Numerical = 7,
    /// Output buffer shorter than required; the message gives the needed length.
    BufferTooSmall = 8,
    /// Wrong handle kind for the call, e.g. features from a log-mean model.
    WrongMode = 9,
    /// Internal panic caught at the boundary.
    Panic = 10,
}

/// Model output type, matching the checkpoint mode byte.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhMode {
    LogMean = 0,
    Classification = 1,
}

/// The seven standard depth metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DhEigenMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rmsl: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

pub struct DhStore(EmbeddingStore);
pub struct DhModel(MlpParameters);
pub struct DhLookupTable(LookupTable);
pub struct DhFrame(DepthFrame);
pub struct DhPlane(HintPlane);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DhStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DhStatus::Io,
            Error::Format { .. } => DhStatus::Format,
            Error::Invalid(_) => DhStatus::InvalidArgument,
            Error::DimMismatch { .. } => DhStatus::DimMismatch,
            Error::Unresolvable(_) => DhStatus::UnknownLabel,
            Error::Numerical(_) => DhStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: DhStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `f`, recording any error or panic for `dh_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DhStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DhStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(DhStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(DhStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(DhStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DhStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DhStatus::NullArgument, format!("`{name}` is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn load_into<T>(
    path: *const c_char,
    out: *mut *mut T,
    load: impl FnOnce(PathBuf) -> depthhint::Result<T>,
) -> DhStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(c_str(path, "path")?);
        *out = Box::into_raw(Box::new(load(path)?));
        Ok(())
    })
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failing call on this thread, or null if none.
///
/// The string is owned by the library and stays valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn dh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a DHEMB embedding file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dh_store_load(path: *const c_char, out: *mut *mut DhStore) -> DhStatus {
    load_into(path, out, |p| EmbeddingStore::load(p).map(DhStore))
}

/// # Safety
/// `store` must be null or a handle from `dh_store_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_store_free(store: *mut DhStore) {
    free(store)
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dh_store_dim(store: *const DhStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.dim())
}

/// Number of labels, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dh_store_len(store: *const DhStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// Copies the vector for `label` (or `background`) into `out`, which must
/// hold `dh_store_dim` floats. `fallback` may be null.
///
/// # Safety
/// Pointers must be valid; `out` must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dh_store_lookup(
    store: *const DhStore,
    label: *const c_char,
    out: *mut f32,
    out_len: usize,
    fallback: *mut bool,
) -> DhStatus {
    guard(|| {
        let store = &deref(store, "store")?.0;
        let label = c_str(label, "label")?;
        let hit = store.lookup(label)?;
        let values = hit.vector.values();
        if out_len < values.len() {
            return Err(fail(
                DhStatus::BufferTooSmall,
                format!("buffer holds {out_len} floats, need {}", values.len()),
            ));
        }
        if out.is_null() {
            return Err(fail(DhStatus::NullArgument, "`out` is null"));
        }
        slice::from_raw_parts_mut(out, values.len()).copy_from_slice(values);
        if let Some(fb) = fallback.as_mut() {
            *fb = hit.fallback;
        }
        Ok(())
    })
}

/// Loads a DHL2 checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dh_model_load(path: *const c_char, out: *mut *mut DhModel) -> DhStatus {
    load_into(path, out, |p| MlpParameters::load(p).map(DhModel))
}

/// # Safety
/// `model` must be null or a handle from `dh_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_model_free(model: *mut DhModel) {
    free(model)
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dh_model_mode(model: *const DhModel, out: *mut DhMode) -> DhStatus {
    guard(|| {
        let model = &deref(model, "model")?.0;
        *out_ptr(out, "out")? = match model.mode() {
            Mode::LogMean => DhMode::LogMean,
            Mode::Classification => DhMode::Classification,
        };
        Ok(())
    })
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dh_model_input_dim(model: *const DhModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().input_dim)
}

/// Predicted mean depth in metres for one embedding. Classification models
/// report the expected bin centre over 0 to 10 m.
///
/// # Safety
/// `input` must point to `len` floats; `model` and `out_depth` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dh_model_predict_depth(
    model: *const DhModel,
    input: *const f32,
    len: usize,
    out_depth: *mut f64,
) -> DhStatus {
    guard(|| {
        let model = &deref(model, "model")?.0;
        let input: Vec<f64> = in_slice(input, len, "input")?.iter().map(|v| f64::from(*v)).collect();
        let out = out_ptr(out_depth, "out_depth")?;
        *out = predict(model, &input, &BinningSpec::default())?.mean_depth;
        Ok(())
    })
}

/// Loads a JSON-lines lookup table.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dh_lookup_load(path: *const c_char, out: *mut *mut DhLookupTable) -> DhStatus {
    load_into(path, out, |p| LookupTable::load(p).map(DhLookupTable))
}

/// # Safety
/// `table` must be null or a handle from `dh_lookup_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_lookup_free(table: *mut DhLookupTable) {
    free(table)
}

/// Mean depth stored for `label` (or `background`). `fallback` may be null.
///
/// # Safety
/// Pointers must be valid; `label` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn dh_lookup_depth(
    table: *const DhLookupTable,
    label: *const c_char,
    out_depth: *mut f64,
    fallback: *mut bool,
) -> DhStatus {
    guard(|| {
        let table = &deref(table, "table")?.0;
        let label = c_str(label, "label")?;
        let out = out_ptr(out_depth, "out_depth")?;
        let (entry, fb) = table.resolve(label)?;
        *out = entry.mean_depth;
        if let Some(f) = fallback.as_mut() {
            *f = fb;
        }
        Ok(())
    })
}

/// Loads a DHF1 frame.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dh_frame_load(path: *const c_char, out: *mut *mut DhFrame) -> DhStatus {
    load_into(path, out, |p| DepthFrame::load(p).map(DhFrame))
}

/// # Safety
/// `frame` must be null or a handle from `dh_frame_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_frame_free(frame: *mut DhFrame) {
    free(frame)
}

unsafe fn render(out: *mut *mut DhPlane, f: impl FnOnce() -> Result<Rendered, Failure>) -> DhStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        *out = Box::into_raw(Box::new(DhPlane(f()?.plane)));
        Ok(())
    })
}

/// One-channel depth plane from a lookup table.
///
/// # Safety
/// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
#[no_mangle]
pub unsafe extern "C" fn dh_render_scalar_lookup(
    frame: *const DhFrame,
    table: *const DhLookupTable,
    out: *mut *mut DhPlane,
) -> DhStatus {
    render(out, || {
        let frame = &deref(frame, "frame")?.0;
        let table = &deref(table, "table")?.0;
        Ok(render_scalar(frame, ScalarSource::Table(table))?)
    })
}

/// One-channel depth plane from a model and its embeddings.
///
/// # Safety
/// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
#[no_mangle]
pub unsafe extern "C" fn dh_render_scalar_model(
    frame: *const DhFrame,
    model: *const DhModel,
    store: *const DhStore,
    out: *mut *mut DhPlane,
) -> DhStatus {
    render(out, || {
        let frame = &deref(frame, "frame")?.0;
        let params = &deref(model, "model")?.0;
        let store = &deref(store, "store")?.0;
        let binning = BinningSpec::default();
        Ok(render_scalar(
            frame,
            ScalarSource::Model {
                params,
                store,
                binning: &binning,
            },
        )?)
    })
}

/// 50-channel feature plane from a classification model.
///
/// # Safety
/// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
#[no_mangle]
pub unsafe extern "C" fn dh_render_features_model(
    frame: *const DhFrame,
    model: *const DhModel,
    store: *const DhStore,
    out: *mut *mut DhPlane,
) -> DhStatus {
    render(out, || {
        let frame = &deref(frame, "frame")?.0;
        let params = &deref(model, "model")?.0;
        let store = &deref(store, "store")?.0;
        if params.mode() != Mode::Classification {
            return Err(fail(DhStatus::WrongMode, "feature hints need a classification model"));
        }
        Ok(render_features(frame, params, store)?)
    })
}

/// 50-channel feature plane from a lookup table exported from a
/// classification model.
///
/// # Safety
/// Handles must be live; `out` must be valid. Free the result with `dh_plane_free`.
#[no_mangle]
pub unsafe extern "C" fn dh_render_features_lookup(
    frame: *const DhFrame,
    table: *const DhLookupTable,
    out: *mut *mut DhPlane,
) -> DhStatus {
    render(out, || {
        let frame = &deref(frame, "frame")?.0;
        let table = &deref(table, "table")?.0;
        Ok(render_features_from_table(frame, table)?)
    })
}

/// Loads a DHP1 plane.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dh_plane_load(path: *const c_char, out: *mut *mut DhPlane) -> DhStatus {
    load_into(path, out, |p| HintPlane::load(p).map(DhPlane))
}

/// # Safety
/// `plane` must be null or a plane handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_plane_free(plane: *mut DhPlane) {
    free(plane)
}

/// Writes height, width and channel count. Any out-pointer may be null.
///
/// # Safety
/// `plane` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dh_plane_shape(
    plane: *const DhPlane,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> DhStatus {
    guard(|| {
        let plane = &deref(plane, "plane")?.0;
        for (p, v) in [
            (height, plane.height()),
            (width, plane.width()),
            (channels, plane.channels()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the row-major, channel-last values and their count.
/// Valid until the plane is freed.
///
/// # Safety
/// `plane` must be a live handle; `data` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dh_plane_data(plane: *const DhPlane, data: *mut *const f32, len: *mut usize) -> DhStatus {
    guard(|| {
        let plane = &deref(plane, "plane")?.0;
        let values = plane.data();
        *out_ptr(data, "data")? = values.as_ptr();
        *out_ptr(len, "len")? = values.len();
        Ok(())
    })
}

/// # Safety
/// `plane` must be a live handle and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn dh_plane_save(plane: *const DhPlane, path: *const c_char) -> DhStatus {
    guard(|| {
        let plane = &deref(plane, "plane")?.0;
        plane.save(c_str(path, "path")?)?;
        Ok(())
    })
}

/// Scale-invariant log loss between positive depths, default form.
///
/// # Safety
/// `pred` and `gt` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dh_silog(pred: *const f64, gt: *const f64, len: usize, out_loss: *mut f64) -> DhStatus {
    guard(|| {
        let pred = in_slice(pred, len, "pred")?;
        let gt = in_slice(gt, len, "gt")?;
        let out = out_ptr(out_loss, "out_loss")?;
        *out = silog(pred, gt, SilogForm::default())?.loss;
        Ok(())
    })
}

/// # Safety
/// `pred` and `gt` must each point to `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dh_eigen_metrics(
    pred: *const f64,
    gt: *const f64,
    len: usize,
    out: *mut DhEigenMetrics,
) -> DhStatus {
    guard(|| {
        let pred = in_slice(pred, len, "pred")?;
        let gt = in_slice(gt, len, "gt")?;
        let out = out_ptr(out, "out")?;
        let m = eigen_metrics(pred, gt)?;
        *out = DhEigenMetrics {
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            rms: m.rms,
            rmsl: m.rmsl,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
        };
        Ok(())
    })
}
