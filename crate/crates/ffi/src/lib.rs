// SPDX-License-Identifier: Apache-2.0

//! C ABI over `ria-core`.
//!
//! Every function returns a [`RiaStatus`] and writes results through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`ria_last_error_message`]. Models, detectors and detection caches are
//! opaque handles released with their `_free` function. Images are passed as
//! `3 × height × width` row-major `double` arrays with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{Array2, Array3};
use ria_core::checkpoint;
use ria_core::detector::{self, DetectionCache, ExtractorKind, Lost, LostConfig};
use ria_core::gradcam::{self, ClassChoice};
use ria_core::loss::{self, LossConfig};
use ria_core::model::ClassifierModel;
use ria_core::noise;
use ria_core::saliency::{self, BBox};
use ria_core::RiaError;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    StaleCache = 5,
    Checkpoint = 6,
    Io = 7,
    NotFound = 8,
    Panic = 9,
}

/// Inclusive pixel box.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct RiaBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

/// A loaded classifier.
pub struct RiaModel {
    inner: ClassifierModel,
}

/// A configured object detector.
pub struct RiaDetector {
    inner: Lost,
}

/// A detection cache checked against a detector's fingerprint.
pub struct RiaCache {
    inner: DetectionCache,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RiaStatus, String);

impl From<RiaError> for Failure {
    fn from(e: RiaError) -> Self {
        let status = match &e {
            RiaError::Config(_) | RiaError::Serde(_) => RiaStatus::Config,
            RiaError::Input(_) => RiaStatus::InvalidArgument,
            RiaError::Data(_) | RiaError::Image { .. } => RiaStatus::Data,
            RiaError::StaleCache { .. } => RiaStatus::StaleCache,
            RiaError::Checkpoint(_) => RiaStatus::Checkpoint,
            RiaError::Io { .. } => RiaStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RiaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RiaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RiaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RiaStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(RiaStatus::NullPointer, format!("{name} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(RiaStatus::NullPointer, format!("{name} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(RiaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

fn to_bbox(b: &RiaBox) -> Result<BBox, Failure> {
    Ok(BBox::new(
        b.x_min as usize,
        b.y_min as usize,
        b.x_max as usize,
        b.y_max as usize,
    )?)
}

fn from_bbox(b: &BBox) -> RiaBox {
    RiaBox {
        x_min: b.x_min as u32,
        y_min: b.y_min as u32,
        x_max: b.x_max as u32,
        y_max: b.y_max as u32,
    }
}

unsafe fn image_from_raw(data: *const f64, height: usize, width: usize) -> Result<Array3<f64>, Failure> {
    if data.is_null() {
        return Err(Failure(RiaStatus::NullPointer, "image is null".into()));
    }
    if height == 0 || width == 0 {
        return Err(invalid("image dimensions must be positive"));
    }
    let n = 3 * height * width;
    let values = std::slice::from_raw_parts(data, n).to_vec();
    Ok(Array3::from_shape_vec((3, height, width), values).expect("length matches shape"))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ria_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ria_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Intersection over union of two boxes.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_iou(a: *const RiaBox, b: *const RiaBox, out: *mut f64) -> RiaStatus {
    guard(|| {
        let (a, b) = (to_bbox(deref(a, "a")?)?, to_bbox(deref(b, "b")?)?);
        *deref_mut(out, "out")? = loss::iou(&a, &b);
        Ok(())
    })
}

/// Intersection area divided by the area of `b_gc`.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_iou_hat(b_od: *const RiaBox, b_gc: *const RiaBox, out: *mut f64) -> RiaStatus {
    guard(|| {
        let (od, gc) = (to_bbox(deref(b_od, "b_od")?)?, to_bbox(deref(b_gc, "b_gc")?)?);
        *deref_mut(out, "out")? = loss::iou_hat(&od, &gc);
        Ok(())
    })
}

/// Hard RIA loss `1 - iou_hat + lambda * diagonal / image_diagonal` for a
/// `width × height` image.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_ria_hard(
    b_od: *const RiaBox,
    b_gc: *const RiaBox,
    lambda: f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> RiaStatus {
    guard(|| {
        let (od, gc) = (to_bbox(deref(b_od, "b_od")?)?, to_bbox(deref(b_gc, "b_gc")?)?);
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        let cfg = LossConfig {
            lambda,
            ..LossConfig::default()
        };
        cfg.validate()?;
        *deref_mut(out, "out")? = loss::ria_hard(&od, &gc, &cfg, (width, height));
        Ok(())
    })
}

/// Relative foreground sensitivity `a_bg - a_fg`; both accuracies must lie in `[0, 1]`.
///
/// # Safety
/// `out` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_rfs(a_bg: f64, a_fg: f64, out: *mut f64) -> RiaStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&a_bg) || !(0.0..=1.0).contains(&a_fg) {
            return Err(invalid(format!("accuracies must lie in [0, 1], got {a_bg} and {a_fg}")));
        }
        *deref_mut(out, "out")? = noise::rfs(a_bg, a_fg);
        Ok(())
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_model_load(path: *const c_char, out: *mut *mut RiaModel) -> RiaStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let slot = deref_mut(out, "out")?;
        let inner = checkpoint::load_model(&path)?;
        *slot = Box::into_raw(Box::new(RiaModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`ria_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ria_model_free(model: *mut RiaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes and square input side length of a model.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_model_info(
    model: *const RiaModel,
    num_classes: *mut usize,
    input_size: *mut usize,
) -> RiaStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *deref_mut(num_classes, "num_classes")? = m.inner.config().num_classes;
        *deref_mut(input_size, "input_size")? = m.inner.config().input_size;
        Ok(())
    })
}

/// Grad-CAM heatmap of one image. `class_index < 0` explains the top-1
/// prediction. Writes `height * width` values to `heatmap` and the explained
/// class to `out_class`.
///
/// # Safety
/// `image` must hold `3 * height * width` values and `heatmap` room for
/// `height * width`; other pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_gradcam(
    model: *const RiaModel,
    image: *const f64,
    height: usize,
    width: usize,
    class_index: i64,
    heatmap: *mut f64,
    out_class: *mut usize,
) -> RiaStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let img = image_from_raw(image, height, width)?;
        if heatmap.is_null() {
            return Err(Failure(RiaStatus::NullPointer, "heatmap is null".into()));
        }
        let out_class = deref_mut(out_class, "out_class")?;
        let choice = if class_index < 0 {
            ClassChoice::Top1
        } else {
            let c = class_index as usize;
            if c >= m.inner.config().num_classes {
                return Err(invalid(format!("class {c} is out of range")));
            }
            ClassChoice::Class(c)
        };
        let hm = gradcam::gradcam(&m.inner, &img, choice)?;
        let dst = std::slice::from_raw_parts_mut(heatmap, height * width);
        for (d, v) in dst.iter_mut().zip(hm.values.iter()) {
            *d = *v;
        }
        *out_class = hm.class_index;
        Ok(())
    })
}

/// Box around the highest-mass connected region of `values > threshold`.
/// `found` is set to 0 when no pixel exceeds the threshold.
///
/// # Safety
/// `values` must hold `height * width` values; other pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_heatmap_box(
    values: *const f64,
    height: usize,
    width: usize,
    threshold: f64,
    out: *mut RiaBox,
    found: *mut i32,
) -> RiaStatus {
    guard(|| {
        if values.is_null() {
            return Err(Failure(RiaStatus::NullPointer, "values is null".into()));
        }
        if height == 0 || width == 0 {
            return Err(invalid("heatmap dimensions must be positive"));
        }
        let data = std::slice::from_raw_parts(values, height * width).to_vec();
        let map = Array2::from_shape_vec((height, width), data).expect("length matches shape");
        let (out, found) = (deref_mut(out, "out")?, deref_mut(found, "found")?);
        let hb = saliency::hard_box(&map, threshold)?;
        match hb.selection {
            Some(sel) => {
                *out = from_bbox(&sel.bbox);
                *found = 1;
            }
            None => {
                *out = RiaBox::default();
                *found = 0;
            }
        }
        Ok(())
    })
}

/// Creates a detector. `extractor` may be null for the default feature
/// extractor; `patch_size` and `k` of 0 select the defaults.
///
/// # Safety
/// `extractor` must be null or a NUL-terminated string; `out` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_detector_new(
    extractor: *const c_char,
    patch_size: usize,
    k: usize,
    out: *mut *mut RiaDetector,
) -> RiaStatus {
    guard(|| {
        let mut cfg = LostConfig::default();
        if !extractor.is_null() {
            cfg.extractor = c_str(extractor, "extractor")?.parse::<ExtractorKind>()?;
        }
        if patch_size > 0 {
            cfg.patch_size = patch_size;
        }
        if k > 0 {
            cfg.k = k;
        }
        let slot = deref_mut(out, "out")?;
        let inner = Lost::new(&cfg)?;
        *slot = Box::into_raw(Box::new(RiaDetector { inner }));
        Ok(())
    })
}

/// Releases a detector; null is ignored.
///
/// # Safety
/// `detector` must come from [`ria_detector_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ria_detector_free(detector: *mut RiaDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Detects the main object of an image. `fallback` is set to 1 when the
/// image was degenerate and the full-image box was returned.
///
/// # Safety
/// `image` must hold `3 * height * width` values; other pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_detect_box(
    detector: *const RiaDetector,
    image: *const f64,
    height: usize,
    width: usize,
    out: *mut RiaBox,
    fallback: *mut i32,
) -> RiaStatus {
    guard(|| {
        let d = deref(detector, "detector")?;
        let img = image_from_raw(image, height, width)?;
        let (out, fallback) = (deref_mut(out, "out")?, deref_mut(fallback, "fallback")?);
        let det = d.inner.detect(&img)?;
        *out = from_bbox(&det.bbox);
        *fallback = i32::from(det.fallback);
        Ok(())
    })
}

/// Opens a detection cache written for `detector`'s configuration; a
/// different configuration yields [`RiaStatus::StaleCache`].
///
/// # Safety
/// `path` must be a NUL-terminated string; other pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_cache_open(
    path: *const c_char,
    detector: *const RiaDetector,
    out: *mut *mut RiaCache,
) -> RiaStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let d = deref(detector, "detector")?;
        let slot = deref_mut(out, "out")?;
        let inner = detector::load_cache(&path, &d.inner.fingerprint())?;
        *slot = Box::into_raw(Box::new(RiaCache { inner }));
        Ok(())
    })
}

/// Releases a cache; null is ignored.
///
/// # Safety
/// `cache` must come from [`ria_cache_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ria_cache_free(cache: *mut RiaCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Number of records in a cache.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_cache_len(cache: *const RiaCache, out: *mut usize) -> RiaStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(cache, "cache")?.inner.len();
        Ok(())
    })
}

/// Looks up the box of `image_id`; [`RiaStatus::NotFound`] when absent.
///
/// # Safety
/// `image_id` must be a NUL-terminated string; other pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn ria_cache_get(
    cache: *const RiaCache,
    image_id: *const c_char,
    out: *mut RiaBox,
    fallback: *mut i32,
) -> RiaStatus {
    guard(|| {
        let c = deref(cache, "cache")?;
        let id = c_str(image_id, "image_id")?;
        let (out, fallback) = (deref_mut(out, "out")?, deref_mut(fallback, "fallback")?);
        let entry = c
            .inner
            .get(id)
            .ok_or_else(|| Failure(RiaStatus::NotFound, format!("no detection for {id}")))?;
        *out = from_bbox(&entry.bbox);
        *fallback = i32::from(entry.fallback);
        Ok(())
    })
}
