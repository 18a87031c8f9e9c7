//! C ABI over fqa-core: correlation helpers, model inference and the tracker.
//!
//! Every fallible function returns an `FqaStatus`; on failure a message is kept
//! per thread and can be read with `fqa_last_error`. Handles are opaque and must
//! be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use fqa_core::data::{BoundingBox, ImageBuffer};
use fqa_core::evaluation::pearson;
use fqa_core::monet::{predict, ModelArchive, MonetWeights, QualityHead};
use fqa_core::pipeline::{update_tracks, Detection, TrackerParams, TrackerState};
use fqa_core::recognition::{cosine_similarity, EmbeddingVector};
use fqa_core::FqaError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Archive = 4,
    Undefined = 5,
    Internal = 6,
}

impl From<&FqaError> for FqaStatus {
    fn from(e: &FqaError) -> Self {
        match e {
            FqaError::Io { .. } | FqaError::Image(_) => FqaStatus::Io,
            FqaError::Archive(_) | FqaError::Parse { .. } | FqaError::Json(_) => FqaStatus::Archive,
            FqaError::UndefinedCorrelation(_) | FqaError::DegenerateEmbedding => FqaStatus::Undefined,
            FqaError::InvalidInput(_) | FqaError::Config(_) | FqaError::MissingEmbedding(_) => {
                FqaStatus::InvalidArgument
            }
            _ => FqaStatus::Internal,
        }
    }
}

/// Landmark network plus the quality head used for scoring.
pub struct FqaModel {
    weights: MonetWeights,
    head: QualityHead,
}

pub struct FqaTracker {
    state: TrackerState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(FqaStatus, String);

impl From<FqaError> for Failure {
    fn from(e: FqaError) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn fail(status: FqaStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FqaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FqaStatus::Internal
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(FqaStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(FqaStatus::NullPointer, format!("{what} is null")))
}

/// Message for the most recent failure on this thread; empty after a success.
/// The pointer stays valid until the next fqa call on the same thread.
#[no_mangle]
pub extern "C" fn fqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Pearson correlation of two length-`n` arrays.
///
/// # Safety
/// `x` and `y` must point to `n` readable doubles; `out_r` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fqa_pearson(x: *const f64, y: *const f64, n: usize, out_r: *mut f64) -> FqaStatus {
    guard(|| {
        let (x, y) = (slice_in(x, n, "x")?, slice_in(y, n, "y")?);
        let out = out_ref(out_r, "out_r")?;
        *out = pearson(x, y)?.r;
        Ok(())
    })
}

/// Cosine similarity of two length-`n` vectors (normalized internally).
///
/// # Safety
/// `a` and `b` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fqa_cosine_similarity(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> FqaStatus {
    guard(|| {
        let (a, b) = (slice_in(a, n, "a")?, slice_in(b, n, "b")?);
        let out = out_ref(out, "out")?;
        let a = EmbeddingVector::normalized(a.to_vec())?;
        let b = EmbeddingVector::normalized(b.to_vec())?;
        *out = cosine_similarity(&a, &b).value;
        Ok(())
    })
}

/// Load a model archive. `variant` selects a named quality head ("BRO", "Blur", ...);
/// null selects the default head, falling back to a zero head.
///
/// # Safety
/// `path` must be a NUL-terminated string, `variant` null or NUL-terminated,
/// `out` writable. The handle must be released with `fqa_model_free`.
#[no_mangle]
pub unsafe extern "C" fn fqa_model_load(
    path: *const c_char,
    variant: *const c_char,
    out: *mut *mut FqaModel,
) -> FqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(fail(FqaStatus::NullPointer, "path is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(FqaStatus::InvalidArgument, "path is not UTF-8"))?;
        let archive = ModelArchive::load(Path::new(path))?;
        let head = if variant.is_null() {
            archive.head.unwrap_or_else(QualityHead::zeros)
        } else {
            let name = CStr::from_ptr(variant)
                .to_str()
                .map_err(|_| fail(FqaStatus::InvalidArgument, "variant is not UTF-8"))?;
            archive
                .variants
                .get(name)
                .cloned()
                .ok_or_else(|| fail(FqaStatus::InvalidArgument, format!("no quality head named {name}")))?
        };
        *out = Box::into_raw(Box::new(FqaModel { weights: archive.weights, head }));
        Ok(())
    })
}

/// Randomly initialized extractor with a zero quality head, for testing.
///
/// # Safety
/// `out` must be writable. Release with `fqa_model_free`.
#[no_mangle]
pub unsafe extern "C" fn fqa_model_random(seed: u64, out: *mut *mut FqaModel) -> FqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = Box::into_raw(Box::new(FqaModel { weights: MonetWeights::random(seed), head: QualityHead::zeros() }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `fqa_model_load`/`fqa_model_random`
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn fqa_model_free(model: *mut FqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Score one face crop given as tightly packed RGB8 rows.
/// Writes five landmarks as x0,y0,...,x4,y4 in crop pixels and the quality score.
///
/// # Safety
/// `rgb` must point to `width * height * 3` bytes, `out_landmarks` to 10
/// writable doubles, `out_quality` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fqa_model_predict(
    model: *const FqaModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    out_landmarks: *mut f64,
    out_quality: *mut f64,
) -> FqaStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| fail(FqaStatus::NullPointer, "model is null"))?;
        let len = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| fail(FqaStatus::InvalidArgument, "image size overflows"))?;
        let data = slice_in(rgb, len, "rgb")?;
        if out_landmarks.is_null() {
            return Err(fail(FqaStatus::NullPointer, "out_landmarks is null"));
        }
        let quality = out_ref(out_quality, "out_quality")?;
        let image = ImageBuffer::new(width, height, data.to_vec())?;
        let p = predict(&model.weights, &model.head, &image)?;
        let lm = slice::from_raw_parts_mut(out_landmarks, 10);
        for (i, pt) in p.landmarks.points.iter().enumerate() {
            lm[2 * i] = pt[0];
            lm[2 * i + 1] = pt[1];
        }
        *quality = p.quality.value;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable. Release with `fqa_tracker_free`.
#[no_mangle]
pub unsafe extern "C" fn fqa_tracker_new(
    iou_threshold: f64,
    max_misses: u32,
    min_confidence: f64,
    out: *mut *mut FqaTracker,
) -> FqaStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if !(0.0..=1.0).contains(&iou_threshold) || max_misses == 0 || !min_confidence.is_finite() {
            return Err(fail(FqaStatus::InvalidArgument, "tracker parameters out of range"));
        }
        let params = TrackerParams { iou_threshold, max_misses, min_confidence };
        *out = Box::into_raw(Box::new(FqaTracker { state: TrackerState::new(params) }));
        Ok(())
    })
}

/// # Safety
/// `tracker` must be null or an unfreed handle from `fqa_tracker_new`.
#[no_mangle]
pub unsafe extern "C" fn fqa_tracker_free(tracker: *mut FqaTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Feed one frame of detections. `boxes` holds x,y,w,h for each of the `n`
/// detections; `confidences` may be null (all 1.0). `out_ids[i]` receives the
/// track id of detection i, or -1 if it was rejected by the confidence gate.
/// Frames must be strictly increasing.
///
/// # Safety
/// `boxes` must point to `4 * n` doubles, `confidences` to `n` doubles or be
/// null, and `out_ids` to `n` writable int64 values.
#[no_mangle]
pub unsafe extern "C" fn fqa_tracker_update(
    tracker: *mut FqaTracker,
    frame: u64,
    boxes: *const f64,
    confidences: *const f64,
    n: usize,
    out_ids: *mut i64,
) -> FqaStatus {
    guard(|| {
        let tracker = tracker.as_mut().ok_or_else(|| fail(FqaStatus::NullPointer, "tracker is null"))?;
        let flat = slice_in(boxes, n.saturating_mul(4), "boxes")?;
        let conf = if confidences.is_null() { None } else { Some(slice_in(confidences, n, "confidences")?) };
        if n > 0 && out_ids.is_null() {
            return Err(fail(FqaStatus::NullPointer, "out_ids is null"));
        }
        let dets = flat
            .chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                Ok(Detection {
                    frame,
                    bbox: BoundingBox::new(b[0], b[1], b[2], b[3])?,
                    confidence: conf.map_or(1.0, |c| c[i]),
                })
            })
            .collect::<Result<Vec<_>, FqaError>>()?;
        let update = update_tracks(&mut tracker.state, &dets, frame)?;
        if n > 0 {
            let ids = slice::from_raw_parts_mut(out_ids, n);
            for (slot, a) in ids.iter_mut().zip(&update.assignments) {
                *slot = a.map_or(-1, |id| id as i64);
            }
        }
        Ok(())
    })
}

/// Number of tracks currently alive (active or lost, not terminated).
///
/// # Safety
/// `tracker` must be null or an unfreed handle.
#[no_mangle]
pub unsafe extern "C" fn fqa_tracker_live_count(tracker: *const FqaTracker) -> usize {
    tracker.as_ref().map_or(0, |t| t.state.tracks.len())
}
