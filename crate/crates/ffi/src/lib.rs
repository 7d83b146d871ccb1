//! C ABI for loading a trained run, running inference and computing IoU.
//!
//! Every fallible function returns a [`TsStatus`]; on failure a message for
//! the calling thread is available from [`ts_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tumorseg::data::Label;
use tumorseg::engine::{
    diagnose, load_run, Detection, EngineError, Mode, SegmentationModel, Segmenter,
};
use tumorseg::metrics::{box_iou, mask_iou, MetricsError};
use tumorseg::types::{BBox, Image, Mask};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Incompatible = 4,
    InvalidImage = 5,
    Io = 6,
    OutOfRange = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsLabel {
    NoTumor = 0,
    Tumor = 1,
}

/// One detection. The box is half-open, in pixels: rows `r0..r1`, columns
/// `c0..c1`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TsDetection {
    pub r0: f64,
    pub c0: f64,
    pub r1: f64,
    pub c1: f64,
    pub score: f64,
    pub mask_area: usize,
}

/// A trained model loaded in inference mode.
pub struct TsModel {
    model: SegmentationModel,
}

/// The detections for one image, best first.
pub struct TsDetections {
    height: usize,
    width: usize,
    items: Vec<Detection>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TsStatus, msg: impl Into<String>) -> TsStatus {
    set_error(msg);
    status
}

fn engine_status(e: &EngineError) -> TsStatus {
    match e {
        EngineError::NotFound(_) => TsStatus::NotFound,
        EngineError::Incompatible { .. }
        | EngineError::ShapeMismatch(_)
        | EngineError::Weights(_) => TsStatus::Incompatible,
        EngineError::InvalidImage(_) => TsStatus::InvalidImage,
        EngineError::Io(_) | EngineError::Write { .. } => TsStatus::Io,
        EngineError::Config(_) => TsStatus::InvalidArgument,
        _ => TsStatus::Internal,
    }
}

fn guarded(f: impl FnOnce() -> TsStatus) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == TsStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            status
        }
        Err(_) => fail(TsStatus::Internal, "internal panic"),
    }
}

fn metrics_status(e: MetricsError) -> TsStatus {
    fail(TsStatus::InvalidArgument, e.to_string())
}

/// Message for the last failure on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the latest checkpoint of the run at `run_dir` (UTF-8 path).
///
/// # Safety
/// `run_dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_model_load(run_dir: *const c_char, out: *mut *mut TsModel) -> TsStatus {
    guarded(|| {
        if run_dir.is_null() || out.is_null() {
            return fail(TsStatus::NullArgument, "run_dir and out must not be NULL");
        }
        *out = ptr::null_mut();
        let Ok(dir) = CStr::from_ptr(run_dir).to_str() else {
            return fail(TsStatus::InvalidArgument, "run_dir is not valid UTF-8");
        };
        match load_run(Path::new(dir)) {
            Ok(mut model) => {
                model.set_mode(Mode::Inference);
                *out = Box::into_raw(Box::new(TsModel { model }));
                TsStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `model` must come from [`ts_model_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_model_free(model: *mut TsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs inference on a row-major, channel-interleaved 8-bit image with 1 or
/// 3 channels.
///
/// # Safety
/// `pixels` must point to `height * width * channels` readable bytes; `model`
/// and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ts_model_predict(
    model: *const TsModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut *mut TsDetections,
) -> TsStatus {
    guarded(|| {
        if model.is_null() || pixels.is_null() || out.is_null() {
            return fail(
                TsStatus::NullArgument,
                "model, pixels and out must not be NULL",
            );
        }
        *out = ptr::null_mut();
        let Some(len) = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
        else {
            return fail(TsStatus::InvalidArgument, "image dimensions overflow");
        };
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        let image = match Image::new(height, width, channels, data) {
            Ok(img) => img,
            Err(e) => return fail(TsStatus::InvalidImage, e.to_string()),
        };
        match (*model).model.predict(&image) {
            Ok(mut items) => {
                items.sort_by(|a, b| b.score.total_cmp(&a.score));
                *out = Box::into_raw(Box::new(TsDetections {
                    height,
                    width,
                    items,
                }));
                TsStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `dets` must come from [`ts_model_predict`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_detections_free(dets: *mut TsDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Number of detections; 0 for NULL.
///
/// # Safety
/// `dets` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_detections_count(dets: *const TsDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// # Safety
/// `dets` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ts_detections_get(
    dets: *const TsDetections,
    index: usize,
    out: *mut TsDetection,
) -> TsStatus {
    guarded(|| {
        let (Some(d), false) = (dets.as_ref(), out.is_null()) else {
            return fail(TsStatus::NullArgument, "dets and out must not be NULL");
        };
        let Some(det) = d.items.get(index) else {
            return fail(
                TsStatus::OutOfRange,
                format!("index {index} out of range ({} detections)", d.items.len()),
            );
        };
        *out = TsDetection {
            r0: det.bbox.r0,
            c0: det.bbox.c0,
            r1: det.bbox.r1,
            c1: det.bbox.c1,
            score: det.score,
            mask_area: det.mask.area(),
        };
        TsStatus::Ok
    })
}

/// Copies detection `index`'s mask as `height * width` bytes of 0 or 1.
///
/// # Safety
/// `buf` must have room for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_detections_mask(
    dets: *const TsDetections,
    index: usize,
    buf: *mut u8,
    buf_len: usize,
) -> TsStatus {
    guarded(|| {
        let (Some(d), false) = (dets.as_ref(), buf.is_null()) else {
            return fail(TsStatus::NullArgument, "dets and buf must not be NULL");
        };
        let Some(det) = d.items.get(index) else {
            return fail(
                TsStatus::OutOfRange,
                format!("index {index} out of range ({} detections)", d.items.len()),
            );
        };
        let need = d.height * d.width;
        if buf_len < need {
            return fail(
                TsStatus::InvalidArgument,
                format!("mask buffer needs {need} bytes, got {buf_len}"),
            );
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (o, &m) in dst.iter_mut().zip(det.mask.data()) {
            *o = m as u8;
        }
        TsStatus::Ok
    })
}

/// Applies the diagnosis rule: tumor when any detection scores at least
/// `threshold`.
///
/// # Safety
/// `dets`, `label` and `confidence` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ts_diagnose(
    dets: *const TsDetections,
    threshold: f64,
    label: *mut TsLabel,
    confidence: *mut f64,
) -> TsStatus {
    guarded(|| {
        let Some(d) = dets.as_ref() else {
            return fail(TsStatus::NullArgument, "dets must not be NULL");
        };
        if label.is_null() || confidence.is_null() {
            return fail(
                TsStatus::NullArgument,
                "label and confidence must not be NULL",
            );
        }
        if !(0.0..=1.0).contains(&threshold) {
            return fail(
                TsStatus::InvalidArgument,
                format!("threshold {threshold} outside [0, 1]"),
            );
        }
        let diag = diagnose(&d.items, threshold);
        *label = match diag.label {
            Label::Tumor => TsLabel::Tumor,
            Label::NoTumor => TsLabel::NoTumor,
        };
        *confidence = diag.confidence;
        TsStatus::Ok
    })
}

/// IoU of two `height * width` masks given as bytes (non-zero = foreground).
///
/// # Safety
/// `a` and `b` must each point to `height * width` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_mask_iou(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> TsStatus {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(TsStatus::NullArgument, "a, b and out must not be NULL");
        }
        let Some(n) = height.checked_mul(width) else {
            return fail(TsStatus::InvalidArgument, "mask dimensions overflow");
        };
        let to_mask = |p: *const u8| {
            let bits = std::slice::from_raw_parts(p, n)
                .iter()
                .map(|&v| v != 0)
                .collect();
            Mask::from_vec(height, width, bits).expect("length matches")
        };
        match mask_iou(&to_mask(a), &to_mask(b)) {
            Ok(v) => {
                *out = v;
                TsStatus::Ok
            }
            Err(e) => metrics_status(e),
        }
    })
}

/// IoU of two boxes given as `[r0, c0, r1, c1]`.
///
/// # Safety
/// `a` and `b` must each point to 4 readable doubles.
#[no_mangle]
pub unsafe extern "C" fn ts_box_iou(a: *const f64, b: *const f64, out: *mut f64) -> TsStatus {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(TsStatus::NullArgument, "a, b and out must not be NULL");
        }
        let to_box = |p: *const f64| {
            let v = std::slice::from_raw_parts(p, 4);
            BBox::new(v[0], v[1], v[2], v[3])
        };
        match box_iou(&to_box(a), &to_box(b)) {
            Ok(v) => {
                *out = v;
                TsStatus::Ok
            }
            Err(e) => metrics_status(e),
        }
    })
}
