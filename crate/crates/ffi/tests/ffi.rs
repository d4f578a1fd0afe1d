// SPDX-License-Identifier: Apache-2.0

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ndarray::Array3;
use ria_core::checkpoint::Checkpoint;
use ria_core::data::{generate_synthetic, SyntheticSpec};
use ria_core::detector::{self, Lost, LostConfig};
use ria_core::gradcam::{self, ClassChoice};
use ria_core::loss::{self, LossConfig};
use ria_core::model::{ClassifierModel, ModelConfig};
use ria_core::saliency::{self, BBox};
use ria_ffi::*;

fn rbox(x0: u32, y0: u32, x1: u32, y1: u32) -> RiaBox {
    RiaBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

fn core_box(b: &RiaBox) -> BBox {
    BBox::new(b.x_min as usize, b.y_min as usize, b.x_max as usize, b.y_max as usize).unwrap()
}

fn last_error() -> String {
    let p = ria_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn box_math_matches_core() {
    let pairs = [
        (rbox(0, 0, 3, 3), rbox(2, 2, 5, 5)),
        (rbox(1, 1, 10, 4), rbox(0, 0, 20, 20)),
        (rbox(5, 5, 5, 5), rbox(6, 6, 8, 9)),
    ];
    for (a, b) in pairs {
        let (mut iou, mut hat, mut hard) = (0.0, 0.0, 0.0);
        unsafe {
            assert_eq!(ria_iou(&a, &b, &mut iou), RiaStatus::Ok);
            assert_eq!(ria_iou_hat(&a, &b, &mut hat), RiaStatus::Ok);
            assert_eq!(ria_ria_hard(&a, &b, 0.1, 32, 32, &mut hard), RiaStatus::Ok);
        }
        assert_eq!(iou, loss::iou(&core_box(&a), &core_box(&b)));
        assert_eq!(hat, loss::iou_hat(&core_box(&a), &core_box(&b)));
        let want = loss::ria_hard(&core_box(&a), &core_box(&b), &LossConfig::default(), (32, 32));
        assert_eq!(hard, want);
        assert!(ria_last_error_message().is_null());
    }
}

#[test]
fn invalid_arguments_report_status_and_message() {
    let mut v = 0.0;
    let good = rbox(0, 0, 1, 1);
    unsafe {
        assert_eq!(ria_iou(ptr::null(), &good, &mut v), RiaStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(ria_iou(&rbox(3, 0, 1, 1), &good, &mut v), RiaStatus::InvalidArgument);
        assert_eq!(ria_ria_hard(&good, &good, -1.0, 8, 8, &mut v), RiaStatus::Config);
        assert_eq!(ria_ria_hard(&good, &good, 0.1, 0, 8, &mut v), RiaStatus::InvalidArgument);
        assert_eq!(ria_rfs(1.5, 0.2, &mut v), RiaStatus::InvalidArgument);
        assert_eq!(ria_rfs(0.9, 0.6, &mut v), RiaStatus::Ok);
    }
    assert!((v - 0.3).abs() < 1e-12);
    let version = unsafe { CStr::from_ptr(ria_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

fn saved_model(dir: &Path) -> (ClassifierModel, CString) {
    let cfg = ModelConfig {
        input_size: 32,
        ..ModelConfig::new("tiny-cnn-3block", 4, 11)
    };
    let model = ClassifierModel::build(&cfg).unwrap();
    let path = dir.join("m.ckpt");
    Checkpoint::from_model(&model).save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

fn test_image(h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((3, h, w), |(c, y, x)| ((c * 7 + y * 3 + x * 5) % 23) as f64 / 22.0)
}

#[test]
fn gradcam_and_heatmap_box_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let mut handle: *mut RiaModel = ptr::null_mut();
    unsafe {
        assert_eq!(ria_model_load(path.as_ptr(), &mut handle), RiaStatus::Ok);
    }
    assert!(!handle.is_null());
    let (mut classes, mut size) = (0usize, 0usize);
    unsafe {
        assert_eq!(ria_model_info(handle, &mut classes, &mut size), RiaStatus::Ok);
    }
    assert_eq!((classes, size), (4, 32));

    let img = test_image(32, 32);
    let flat: Vec<f64> = img.iter().copied().collect();
    for class in [-1i64, 2] {
        let mut heat = vec![0.0; 32 * 32];
        let mut explained = 99usize;
        unsafe {
            let st = ria_gradcam(handle, flat.as_ptr(), 32, 32, class, heat.as_mut_ptr(), &mut explained);
            assert_eq!(st, RiaStatus::Ok);
        }
        let choice = if class < 0 { ClassChoice::Top1 } else { ClassChoice::Class(class as usize) };
        let want = gradcam::gradcam(&model, &img, choice).unwrap();
        assert_eq!(explained, want.class_index);
        assert!(heat.iter().zip(want.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let (mut b, mut found) = (RiaBox::default(), -1);
        unsafe {
            assert_eq!(ria_heatmap_box(heat.as_ptr(), 32, 32, 0.5, &mut b, &mut found), RiaStatus::Ok);
        }
        let hb = saliency::hard_box(&want.values, 0.5).unwrap();
        match hb.selection {
            Some(sel) => {
                assert_eq!(found, 1);
                assert_eq!(core_box(&b), sel.bbox);
            }
            None => assert_eq!(found, 0),
        }
    }

    let mut heat = vec![0.0; 16 * 16];
    let mut explained = 0usize;
    let small: Vec<f64> = test_image(16, 16).iter().copied().collect();
    unsafe {
        let st = ria_gradcam(handle, small.as_ptr(), 16, 16, -1, heat.as_mut_ptr(), &mut explained);
        assert_eq!(st, RiaStatus::InvalidArgument);
        let st = ria_gradcam(handle, flat.as_ptr(), 32, 32, 4, vec![0.0; 1024].as_mut_ptr(), &mut explained);
        assert_eq!(st, RiaStatus::InvalidArgument);
        ria_model_free(handle);
        ria_model_free(ptr::null_mut());
    }
}

#[test]
fn heatmap_box_without_foreground() {
    let zeros = [0.0; 12];
    let (mut b, mut found) = (rbox(1, 1, 1, 1), -1);
    unsafe {
        assert_eq!(ria_heatmap_box(zeros.as_ptr(), 3, 4, 0.5, &mut b, &mut found), RiaStatus::Ok);
        assert_eq!(found, 0);
        assert_eq!(ria_heatmap_box(zeros.as_ptr(), 3, 4, 1.5, &mut b, &mut found), RiaStatus::Config);
    }
}

#[test]
fn model_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let garbage_path = dir.path().join("bad.ckpt");
    std::fs::write(&garbage_path, b"not a checkpoint").unwrap();
    let garbage = CString::new(garbage_path.to_str().unwrap()).unwrap();
    let mut handle: *mut RiaModel = ptr::null_mut();
    unsafe {
        assert_eq!(ria_model_load(missing.as_ptr(), &mut handle), RiaStatus::Io);
        assert_eq!(ria_model_load(garbage.as_ptr(), &mut handle), RiaStatus::Checkpoint);
        assert!(last_error().contains("magic"));
        assert_eq!(ria_model_load(ptr::null(), &mut handle), RiaStatus::NullPointer);
    }
    assert!(handle.is_null());
}

#[test]
fn detector_and_cache() {
    let ds = generate_synthetic(&SyntheticSpec {
        per_class: 1,
        size: 32,
        ..Default::default()
    })
    .unwrap();
    let mut det: *mut RiaDetector = ptr::null_mut();
    unsafe {
        assert_eq!(ria_detector_new(ptr::null(), 0, 0, &mut det), RiaStatus::Ok);
    }
    let lost = Lost::new(&LostConfig::default()).unwrap();
    for s in &ds.samples {
        let img = s.image_f64();
        let flat: Vec<f64> = img.iter().copied().collect();
        let (mut b, mut fallback) = (RiaBox::default(), -1);
        unsafe {
            let st = ria_detect_box(det, flat.as_ptr(), s.height(), s.width(), &mut b, &mut fallback);
            assert_eq!(st, RiaStatus::Ok);
        }
        let want = lost.detect(&img).unwrap();
        assert_eq!(core_box(&b), want.bbox);
        assert_eq!(fallback, i32::from(want.fallback));
    }

    let dir = tempfile::tempdir().unwrap();
    let path: PathBuf = dir.path().join("detections.tsv");
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
    let cache = detector::precompute_cache(&ids, |i| Ok(ds.samples[i].image_f64()), &lost).unwrap();
    cache.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle: *mut RiaCache = ptr::null_mut();
    let mut len = 0usize;
    unsafe {
        assert_eq!(ria_cache_open(cpath.as_ptr(), det, &mut handle), RiaStatus::Ok);
        assert_eq!(ria_cache_len(handle, &mut len), RiaStatus::Ok);
    }
    assert_eq!(len, ds.len());
    for s in &ds.samples {
        let id = CString::new(s.id.as_str()).unwrap();
        let (mut b, mut fallback) = (RiaBox::default(), -1);
        unsafe {
            assert_eq!(ria_cache_get(handle, id.as_ptr(), &mut b, &mut fallback), RiaStatus::Ok);
        }
        assert_eq!(core_box(&b), cache.get(&s.id).unwrap().bbox);
    }
    let unknown = CString::new("nope.png").unwrap();
    let (mut b, mut fallback) = (RiaBox::default(), 0);
    unsafe {
        assert_eq!(ria_cache_get(handle, unknown.as_ptr(), &mut b, &mut fallback), RiaStatus::NotFound);
        ria_cache_free(handle);
    }

    let mut other: *mut RiaDetector = ptr::null_mut();
    let mut stale: *mut RiaCache = ptr::null_mut();
    let mean_color = CString::new("mean-color").unwrap();
    let bogus = CString::new("bogus").unwrap();
    unsafe {
        assert_eq!(ria_detector_new(bogus.as_ptr(), 0, 0, &mut other), RiaStatus::Config);
        assert_eq!(ria_detector_new(mean_color.as_ptr(), 4, 10, &mut other), RiaStatus::Ok);
        assert_eq!(ria_cache_open(cpath.as_ptr(), other, &mut stale), RiaStatus::StaleCache);
        assert!(stale.is_null());
        ria_detector_free(other);
        ria_detector_free(det);
    }
}

/// Builds `tests/smoke.c` against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include").join("ria.h");
    assert!(header.exists(), "the build script writes include/ria.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "ria_iou",
        "ria_iou_hat",
        "ria_ria_hard",
        "ria_rfs",
        "ria_gradcam",
        "ria_heatmap_box",
        "ria_detect_box",
        "ria_cache_open",
        "ria_last_error_message",
    ] {
        assert!(text.contains(&format!("{sym}(")), "{sym} missing from ria.h");
    }

    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = target_dir.join("libria_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping C link check: no C compiler or static library");
        return;
    }
    let out_dir = tempfile::tempdir().unwrap();
    let bin = out_dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests").join("smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "smoke program exited with {:?}", run.status);
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
