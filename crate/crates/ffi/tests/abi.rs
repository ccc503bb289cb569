use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use vista::synthetic::{clustered_corpus, SyntheticSpec};
use vista_ffi::*;

fn last_error() -> String {
    let p = vista_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vista_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut cfg: *mut VistaConfig = ptr::null_mut();
    let s = unsafe { vista_config_load(ptr::null(), &mut cfg) };
    assert_eq!(s, VistaStatus::NullPointer);
    assert!(last_error().contains("path"));
    assert!(cfg.is_null());
    assert_eq!(unsafe { vista_run(ptr::null()) }, VistaStatus::NullPointer);
    assert_eq!(unsafe { vista_gain_curve_len(ptr::null()) }, 0);
    unsafe {
        vista_config_free(ptr::null_mut());
        vista_gain_curve_free(ptr::null_mut());
        vista_bundle_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: *mut VistaConfig = ptr::null_mut();
    let missing = cstr(&dir.path().join("missing.json"));
    assert_eq!(
        unsafe { vista_config_load(missing.as_ptr(), &mut cfg) },
        VistaStatus::Io
    );

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let bad = cstr(&bad);
    assert_eq!(unsafe { vista_config_load(bad.as_ptr(), &mut cfg) }, VistaStatus::Parse);

    let (c, o) = (cstr(Path::new("c.jsonl")), cstr(Path::new("out")));
    assert_eq!(
        unsafe { vista_config_new(c.as_ptr(), 8, 9, o.as_ptr(), &mut cfg) },
        VistaStatus::Ok
    );
    assert_eq!(unsafe { vista_config_validate(cfg) }, VistaStatus::InvalidArgument);
    assert!(last_error().contains("latent 9"));
    // a successful call clears the message
    assert_eq!(unsafe { vista_config_set_seed(cfg, 3) }, VistaStatus::Ok);
    assert!(vista_last_error_message().is_null());
    unsafe { vista_config_free(cfg) };
}

#[test]
fn gain_curve_round_trip() {
    let n = 40;
    let a: Vec<f64> = (0..n).flat_map(|i| [i as f64, (i * i % 7) as f64]).collect();
    let fractions = [0.05, 0.1, 0.2];
    let mut curve: *mut VistaGainCurve = ptr::null_mut();
    let s = unsafe { vista_gain_curve_compute(a.as_ptr(), a.as_ptr(), n, fractions.as_ptr(), 3, &mut curve) };
    assert_eq!(s, VistaStatus::Ok);
    assert_eq!(unsafe { vista_gain_curve_len(curve) }, 3);
    for (i, &expect) in fractions.iter().enumerate() {
        let (mut f, mut k, mut m, mut g) = (0.0, 0usize, 0.0, 0.0);
        assert_eq!(
            unsafe { vista_gain_curve_point(curve, i, &mut f, &mut k, &mut m, &mut g) },
            VistaStatus::Ok
        );
        assert_eq!(f, expect);
        assert_eq!(m, 1.0);
        assert!((g - (1.0 - k as f64 / (n - 1) as f64)).abs() < 1e-12);
    }
    let mut best = usize::MAX;
    assert_eq!(unsafe { vista_gain_curve_argmax(curve, &mut best) }, VistaStatus::Ok);
    assert_eq!(best, 0);
    let s = unsafe {
        vista_gain_curve_point(
            curve,
            3,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(s, VistaStatus::InvalidArgument);
    unsafe { vista_gain_curve_free(curve) };

    let bad = [1.5];
    let mut c2: *mut VistaGainCurve = ptr::null_mut();
    let s = unsafe { vista_gain_curve_compute(a.as_ptr(), a.as_ptr(), n, bad.as_ptr(), 1, &mut c2) };
    assert_eq!(s, VistaStatus::InvalidArgument);
    assert!(c2.is_null());
}

#[test]
fn pipeline_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        per_cluster: 30,
        ..Default::default()
    };
    let corpus = dir.path().join("c.jsonl");
    clustered_corpus(&spec).unwrap().corpus.save(&corpus).unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"corpus": "c.jsonl", "dim": 32, "latent_id": 31, "out_dir": "out",
            "layout": {"epochs": 50}, "cartography": {"grid_w": 96},
            "panorama": {"width_px": 256, "height_px": 144, "steps": 2}}"#,
    )
    .unwrap();
    let mut cfg: *mut VistaConfig = ptr::null_mut();
    let p = cstr(&cfg_path);
    assert_eq!(unsafe { vista_config_load(p.as_ptr(), &mut cfg) }, VistaStatus::Ok);
    assert_eq!(unsafe { vista_config_set_selection_count(cfg, 150) }, VistaStatus::Ok);
    assert_eq!(unsafe { vista_run(cfg) }, VistaStatus::Ok, "{}", last_error_or_empty());
    // a second run on a locked directory fails as a stage
    std::fs::write(dir.path().join("out/.vista.lock"), "1").unwrap();
    assert_eq!(unsafe { vista_run(cfg) }, VistaStatus::Stage);
    unsafe { vista_config_free(cfg) };

    let mut bundle: *mut VistaBundle = ptr::null_mut();
    let out = cstr(&dir.path().join("out"));
    assert_eq!(unsafe { vista_bundle_open(out.as_ptr(), &mut bundle) }, VistaStatus::Ok);
    assert_eq!(unsafe { vista_bundle_item_count(bundle) }, 150);
    assert!(unsafe { vista_bundle_cluster_count(bundle) } >= 1);
    assert_eq!(unsafe { vista_bundle_level_count(bundle) }, 1);
    unsafe { vista_bundle_free(bundle) };
}

fn last_error_or_empty() -> String {
    let p = vista_last_error_message();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = crate_dir().join("include/vista.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "vista_run",
        "vista_gain_curve_compute",
        "VISTA_STATUS_STAGE",
        "typedef struct VistaConfig VistaConfig",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let out = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .output()
            .expect("C compiler available");
        assert!(
            out.status.success(),
            "{compiler}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    // the staticlib sits next to the test binary's deps directory
    let exe = std::env::current_exe().unwrap();
    let profile = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile.join("libvista_ffi.a");
    assert!(lib.is_file(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "vista.h"
int main(void) {
    double a[] = {0, 0, 1, 0, 3, 0, 7, 0, 15, 0};
    double f[] = {0.25};
    VistaGainCurve *c = NULL;
    if (vista_gain_curve_compute(a, a, 5, f, 1, &c) != VISTA_STATUS_OK) return 1;
    double g = 0;
    vista_gain_curve_point(c, 0, NULL, NULL, NULL, &g);
    vista_gain_curve_free(c);
    VistaConfig *cfg = NULL;
    if (vista_config_load(NULL, &cfg) != VISTA_STATUS_NULL_POINTER) return 2;
    printf("%s %.6f\n", vista_last_error_message(), g);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "path is null 0.750000");
}
