use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use stemob_ffi::*;

fn last_error() -> String {
    let p = stem_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn schedule(kind: StemScheduleKind, steps: usize) -> *mut StemSchedule {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { stem_schedule_new(kind, steps, &mut s) }, StemStatus::Ok);
    s
}

fn latent(shape: &[usize], data: &[f32]) -> *mut StemLatent {
    let mut x = ptr::null_mut();
    let st = unsafe { stem_latent_new(shape.as_ptr(), shape.len(), data.as_ptr(), &mut x) };
    assert_eq!(st, StemStatus::Ok);
    x
}

fn values(x: *const StemLatent) -> Vec<f32> {
    unsafe { std::slice::from_raw_parts(stem_latent_data(x), stem_latent_len(x)) }.to_vec()
}

#[test]
fn schedule_queries() {
    let s = schedule(StemScheduleKind::Cosine, 50);
    unsafe {
        assert_eq!(stem_schedule_steps(s), 50);
        let mut ab = 0.0;
        assert_eq!(stem_schedule_alpha_bar(s, 0, &mut ab), StemStatus::Ok);
        assert_eq!(ab, 1.0);
        assert_eq!(stem_schedule_alpha_bar(s, 15, &mut ab), StemStatus::Ok);
        assert!((ab - 0.786_910_511_150_829_3).abs() < 1e-12);
        assert_eq!(stem_schedule_alpha_bar(s, 51, &mut ab), StemStatus::OutOfRange);
        assert!(last_error().contains("51"));
        assert_eq!(stem_schedule_alpha_bar(ptr::null(), 1, &mut ab), StemStatus::NullPointer);
        stem_schedule_free(s);
        stem_schedule_free(ptr::null_mut());
        let mut bad = ptr::null_mut();
        assert_ne!(stem_schedule_new(StemScheduleKind::Linear, 0, &mut bad), StemStatus::Ok);
        assert!(bad.is_null());
        assert_eq!(stem_schedule_steps(ptr::null()), 0);
    }
}

#[test]
fn latent_lifecycle() {
    let x = latent(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    unsafe {
        assert_eq!(stem_latent_len(x), 6);
        assert_eq!(stem_latent_ndim(x), 2);
        let mut shape = [0usize; 2];
        assert_eq!(stem_latent_shape(x, shape.as_mut_ptr(), 2), StemStatus::Ok);
        assert_eq!(shape, [2, 3]);
        assert_eq!(stem_latent_shape(x, shape.as_mut_ptr(), 1), StemStatus::ShapeMismatch);
        assert_eq!(values(x), [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        stem_latent_free(x);

        let nan = [f32::NAN];
        let mut y = ptr::null_mut();
        assert_ne!(stem_latent_new([1usize].as_ptr(), 1, nan.as_ptr(), &mut y), StemStatus::Ok);
        assert!(y.is_null());
        assert_eq!(
            stem_latent_new(ptr::null(), 1, nan.as_ptr(), &mut y),
            StemStatus::NullPointer
        );
        assert!(stem_latent_data(ptr::null()).is_null());
    }
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..12).map(|i| i as f32 / 6.0 - 1.0).collect();
    let x = latent(&[3, 2, 2], &data);
    let tensor = CString::new(dir.path().join("x.stem").to_str().unwrap()).unwrap();
    let png = CString::new(dir.path().join("x.png").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(stem_latent_write_tensor(x, tensor.as_ptr()), StemStatus::Ok);
        assert_eq!(stem_latent_save_png(x, png.as_ptr()), StemStatus::Ok);
        let mut t = ptr::null_mut();
        assert_eq!(stem_latent_load(tensor.as_ptr(), &mut t), StemStatus::Ok);
        assert_eq!(values(t), data);
        let mut p = ptr::null_mut();
        assert_eq!(stem_latent_load(png.as_ptr(), &mut p), StemStatus::Ok);
        for (a, b) in values(p).iter().zip(&data) {
            assert!((a - b).abs() <= 1.0 / 127.5);
        }
        let missing = CString::new(dir.path().join("none.stem").to_str().unwrap()).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(stem_latent_load(missing.as_ptr(), &mut m), StemStatus::Io);
        let txt = CString::new("notes.txt").unwrap();
        assert_eq!(stem_latent_load(txt.as_ptr(), &mut m), StemStatus::Format);
        stem_latent_free(t);
        stem_latent_free(p);
        stem_latent_free(x);
    }
}

#[test]
fn inversion_matches_library() {
    let s = schedule(StemScheduleKind::Cosine, 50);
    let data: Vec<f32> = (0..48).map(|i| (i as f32 * 0.37).sin()).collect();
    let x = latent(&[3, 4, 4], &data);
    let lib_sched = stemob::NoiseSchedule::with_defaults(stemob::ScheduleKind::Cosine, 50).unwrap();
    let lib_x = stemob::Latent::new(vec![3, 4, 4], data.clone()).unwrap();
    unsafe {
        let mut y = ptr::null_mut();
        assert_eq!(stem_ddpm_invert(x, s, 15, 7, 9, &mut y), StemStatus::Ok);
        let expected = stemob::inversion::ddpm_invert(&lib_x, &lib_sched, 15, stemob::NoiseKey::new(7, 9, 0)).unwrap();
        assert_eq!(values(y), expected.data());

        let mut z = ptr::null_mut();
        assert_eq!(stem_preprocess(x, s, StemMethod::Ddpm, 15, 7, 9, &mut z), StemStatus::Ok);
        assert_eq!(values(z), values(y));

        let mut w = ptr::null_mut();
        assert_eq!(stem_preprocess(x, s, StemMethod::Ddim, 0, 7, 9, &mut w), StemStatus::Ok);
        assert_eq!(values(w), data);
        let mut bad = ptr::null_mut();
        assert_eq!(stem_preprocess(x, s, StemMethod::Ddim, 60, 7, 9, &mut bad), StemStatus::InvalidArgument);
        assert!(last_error().contains("60"));
        for p in [y, z, w] {
            stem_latent_free(p);
        }
        stem_latent_free(x);
        stem_schedule_free(s);
    }
}

#[test]
fn attribute_losses() {
    let s = schedule(StemScheduleKind::Cosine, 50);
    let x = latent(&[2], &[0.0, 0.0]);
    let y = latent(&[2], &[0.3, 0.4]);
    unsafe {
        let mut l = 0.0;
        assert_eq!(stem_attribute_loss(x, x, s, StemMethod::Ddpm, 10, &mut l), StemStatus::Ok);
        assert_eq!(l, 0.5);
        let mut ddpm = 0.0;
        let mut ddim = 0.0;
        assert_eq!(stem_attribute_loss(x, y, s, StemMethod::Ddpm, 1, &mut ddpm), StemStatus::Ok);
        assert_eq!(stem_attribute_loss(x, y, s, StemMethod::Ddim, 1, &mut ddim), StemStatus::Ok);
        assert!((ddpm - ddim).abs() < 1e-12);
        assert!(ddpm > 0.0 && ddpm < 0.5);
        assert_eq!(stem_attribute_loss(x, y, s, StemMethod::Ddpm, 0, &mut l), StemStatus::OutOfRange);

        let mut t = 99;
        assert_eq!(stem_tau(x, y, s, StemMethod::Ddpm, 0.4, &mut t), StemStatus::Ok);
        assert!((1..=50).contains(&t));
        assert_eq!(stem_tau(x, y, s, StemMethod::Ddpm, 0.5, &mut t), StemStatus::OutOfRange);
        let z = latent(&[3], &[0.0; 3]);
        assert_eq!(stem_tau(x, z, s, StemMethod::Ddpm, 0.4, &mut t), StemStatus::ShapeMismatch);
        stem_latent_free(z);
        stem_latent_free(x);
        stem_latent_free(y);
        stem_schedule_free(s);
    }
}

#[test]
fn stream_ids_match_pipeline() {
    let id = CString::new("train-00042").unwrap();
    assert_eq!(unsafe { stem_stream_id(id.as_ptr()) }, stemob::pipeline::stream_id_for("train-00042"));
}

#[test]
fn error_state_is_cleared_on_success() {
    let s = schedule(StemScheduleKind::Linear, 10);
    unsafe {
        let mut ab = 0.0;
        assert_ne!(stem_schedule_alpha_bar(s, 11, &mut ab), StemStatus::Ok);
        assert!(!stem_last_error().is_null());
        assert_eq!(stem_schedule_alpha_bar(s, 10, &mut ab), StemStatus::Ok);
        assert!(stem_last_error().is_null());
        stem_schedule_free(s);
    }
}

#[test]
fn header_is_generated_and_parses() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stemob.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "stem_schedule_new",
        "stem_latent_new",
        "stem_ddpm_invert",
        "stem_preprocess",
        "stem_tau",
        "STEM_STATUS_OK",
        "typedef struct StemLatent StemLatent",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    match Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    {
        Ok(st) => assert!(st.success(), "header does not compile as C"),
        Err(_) => eprintln!("no C compiler found; skipping syntax check"),
    }
}

#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libstemob_ffi.so");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let Ok(st) = Command::new("cc")
        .arg(crate_dir.join("examples/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg("-L")
        .arg(profile_dir)
        .arg("-lstemob_ffi")
        .arg("-o")
        .arg(&bin)
        .status()
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(st.success());
    let out = Command::new(&bin)
        .env("LD_LIBRARY_PATH", profile_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("alpha_bar_15=0.786910511151 len=12"), "{text}");
}
