use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tmrd_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(tmrd_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take_string(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    tmrd_string_free(p);
    s
}

unsafe fn tiny_run(ds: *const TmrdDataset) -> *mut TmrdRun {
    let mut cfg = ptr::null_mut();
    assert_eq!(tmrd_config_default(&mut cfg), TmrdStatus::Ok);
    for (k, v) in [
        ("train.burn_in_iterations", "3"),
        ("train.total_iterations", "9"),
        ("train.n", "2"),
        ("train.n_prime", "2"),
        ("train.batch_labeled", "2"),
        ("train.batch_unlabeled", "2"),
        ("train.eval_interval", "4"),
        ("model.c1", "4"),
        ("model.c2", "6"),
        ("model.kernel", "3"),
        ("pseudo.conf_threshold", "0.05"),
    ] {
        assert_eq!(tmrd_config_set(cfg, cstr(k).as_ptr(), cstr(v).as_ptr()), TmrdStatus::Ok, "{k}");
    }
    let mut run = ptr::null_mut();
    assert_eq!(tmrd_run_new(cfg, ds, &mut run), TmrdStatus::Ok, "{}", last_error());
    tmrd_config_free(cfg);
    run
}

#[test]
fn dataset_round_trip_and_counts() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(tmrd_dataset_generate(42, 100, 0.1, &mut ds), TmrdStatus::Ok);
        let (mut l, mut u, mut t) = (0, 0, 0);
        assert_eq!(tmrd_dataset_counts(ds, &mut l, &mut u, &mut t), TmrdStatus::Ok);
        assert_eq!((l, u, t), (10, 90, 100));

        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().join("d.tmrd").to_str().unwrap());
        assert_eq!(tmrd_dataset_save(ds, path.as_ptr()), TmrdStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(tmrd_dataset_load(path.as_ptr(), &mut back), TmrdStatus::Ok);
        let mut l2 = 0;
        assert_eq!(tmrd_dataset_counts(back, &mut l2, ptr::null_mut(), ptr::null_mut()), TmrdStatus::Ok);
        assert_eq!(l2, 10);
        tmrd_dataset_free(back);
        tmrd_dataset_free(ds);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(tmrd_dataset_generate(1, 10, 1.5, &mut ds), TmrdStatus::InvalidArgument);
        assert!(ds.is_null());
        assert!(last_error().contains("ratio"), "{}", last_error());

        assert_eq!(tmrd_dataset_generate(1, 10, 0.5, ptr::null_mut()), TmrdStatus::NullPointer);
        let missing = cstr("/nonexistent/dir/d.tmrd");
        assert_eq!(tmrd_dataset_load(missing.as_ptr(), &mut ds), TmrdStatus::Io);

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk");
        std::fs::write(&junk, b"not a dataset").unwrap();
        let junk = cstr(junk.to_str().unwrap());
        assert_eq!(tmrd_dataset_load(junk.as_ptr(), &mut ds), TmrdStatus::Format);

        let mut cfg = ptr::null_mut();
        let text = cstr("train.n = 0\ntrain.bogus = 1\n");
        assert_eq!(tmrd_config_parse(text.as_ptr(), &mut cfg), TmrdStatus::Config);
        let msg = last_error();
        assert!(msg.contains("train.n") && msg.contains("train.bogus"), "{msg}");

        assert_eq!(tmrd_config_default(&mut cfg), TmrdStatus::Ok);
        assert_eq!(tmrd_config_set(cfg, cstr("train.alpha").as_ptr(), cstr("x").as_ptr()), TmrdStatus::Config);
        assert_eq!(tmrd_config_set(cfg, ptr::null(), cstr("1").as_ptr()), TmrdStatus::NullPointer);
        // a success clears the message
        assert_eq!(tmrd_config_set(cfg, cstr("train.seed").as_ptr(), cstr("4").as_ptr()), TmrdStatus::Ok);
        assert_eq!(last_error(), "");
        let mut out = ptr::null_mut();
        assert_eq!(tmrd_config_to_text(cfg, &mut out), TmrdStatus::Ok);
        assert!(take_string(out).contains("train.seed = 4"));
        tmrd_config_free(cfg);

        assert_eq!(tmrd_gradcheck(7, 1e-5, 0, ptr::null_mut(), ptr::null_mut()), TmrdStatus::InvalidArgument);
        assert_eq!(tmrd_run_until(ptr::null_mut(), 3), TmrdStatus::NullPointer);
        tmrd_run_free(ptr::null_mut());
        tmrd_string_free(ptr::null_mut());
    }
}

#[test]
fn run_resume_matches_uninterrupted() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(tmrd_dataset_generate(5, 24, 0.25, &mut ds), TmrdStatus::Ok);

        let full = tiny_run(ds);
        assert_eq!(tmrd_run_until(full, usize::MAX), TmrdStatus::Ok, "{}", last_error());
        let mut it = 0;
        assert_eq!(tmrd_run_iteration(full, &mut it), TmrdStatus::Ok);
        assert_eq!(it, 9);
        let mut csv = ptr::null_mut();
        assert_eq!(tmrd_run_metrics_csv(full, &mut csv), TmrdStatus::Ok);
        let full_csv = take_string(csv);
        assert!(full_csv.starts_with("iteration,stage,"));
        assert_eq!(full_csv.lines().count(), 10);

        let half = tiny_run(ds);
        assert_eq!(tmrd_run_until(half, 5), TmrdStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().join("c.tmrc").to_str().unwrap());
        assert_eq!(tmrd_run_save(half, path.as_ptr()), TmrdStatus::Ok);
        tmrd_run_free(half);
        let mut resumed = ptr::null_mut();
        assert_eq!(tmrd_run_load(path.as_ptr(), ds, &mut resumed), TmrdStatus::Ok, "{}", last_error());
        assert_eq!(tmrd_run_until(resumed, usize::MAX), TmrdStatus::Ok);
        let mut csv = ptr::null_mut();
        assert_eq!(tmrd_run_metrics_csv(resumed, &mut csv), TmrdStatus::Ok);
        assert_eq!(take_string(csv), full_csv);

        let (mut a, mut m, mut k) = (-1.0, -1.0, -1.0);
        assert_eq!(tmrd_run_evaluate(resumed, &mut a, &mut m, &mut k), TmrdStatus::Ok);
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&m) && k >= 0.0);

        tmrd_run_free(resumed);
        tmrd_run_free(full);
        tmrd_dataset_free(ds);
    }
}

#[test]
fn divergence_is_reported() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(tmrd_dataset_generate(5, 24, 0.25, &mut ds), TmrdStatus::Ok);
        let run = tiny_run(ds);
        tmrd_run_free(run);
        let mut cfg = ptr::null_mut();
        assert_eq!(tmrd_config_default(&mut cfg), TmrdStatus::Ok);
        assert_eq!(tmrd_config_set(cfg, cstr("train.burn_in_lr").as_ptr(), cstr("1e200").as_ptr()), TmrdStatus::Ok);
        assert_eq!(tmrd_config_set(cfg, cstr("train.batch_labeled").as_ptr(), cstr("2").as_ptr()), TmrdStatus::Ok);
        let mut run = ptr::null_mut();
        assert_eq!(tmrd_run_new(cfg, ds, &mut run), TmrdStatus::Ok);
        assert_eq!(tmrd_run_until(run, 5), TmrdStatus::Diverged);
        assert!(last_error().contains("BURN_IN"), "{}", last_error());
        tmrd_run_free(run);
        tmrd_config_free(cfg);
        tmrd_dataset_free(ds);
    }
}

#[test]
fn tmr_gradcheck_passes() {
    let (mut err, mut ok) = (f64::NAN, false);
    assert_eq!(unsafe { tmrd_gradcheck(1, 1e-5, 0, &mut err, &mut ok) }, TmrdStatus::Ok);
    assert!(ok && err <= 1e-4, "{err}");
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(tmrd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(crate_dir().join("include/tmrd.h")).unwrap();
    let src = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 18, "{exports:?}");
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    for item in ["typedef struct TmrdRun TmrdRun;", "TMRD_STATUS_DIVERGED = 6"] {
        assert!(header.contains(item), "{item}");
    }
}

/// Directory holding `libtmrd_ffi.a`: the profile directory above `deps/`.
fn lib_dir() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?.to_path_buf();
    dir.join("libtmrd_ffi.a").exists().then_some(dir)
}

fn have(tool: &str) -> bool {
    Command::new(tool).arg("--version").output().is_ok()
}

#[test]
fn c_program_links_against_header() {
    let Some(lib) = lib_dir() else {
        eprintln!("skipping: static library not found next to the test binary");
        return;
    };
    if !have("cc") {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("examples/smoke.c"))
        .arg(lib.join("libtmrd_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(Path::new(&exe)).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout} {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("labeled=10 unlabeled=10 "), "{stdout}");
}
