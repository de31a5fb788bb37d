use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use weakiv::estimators::{estimate_2sls, estimate_liml};
use weakiv::overid::kp_test;
use weakiv::{CovarianceSpec, IvDataset};
use weakiv_ffi::*;

/// n = 40 deterministic fixture, column-major, with an intercept column.
fn fixture() -> (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = 40;
    let mut z = vec![0.0; n * 2];
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let t = i as f64;
        let z1 = (0.7 * t).sin() + 0.1 * t;
        let z2 = (1.3 * t).cos();
        let v = (2.1 * t + 0.4).sin() * 0.5;
        let u = 0.6 * v + (3.7 * t).cos() * (1.0 + z1.abs()) * 0.3;
        z[i] = z1;
        z[n + i] = z2;
        x[i] = 0.8 * z1 + 0.5 * z2 + v;
        y[i] = 1.0 + 0.5 * x[i] + u;
    }
    (n, y, x, z, vec![1.0; n])
}

fn reference() -> IvDataset {
    let (n, y, x, z, w) = fixture();
    IvDataset::new(
        nalgebra::DVector::from_vec(y),
        nalgebra::DMatrix::from_vec(n, 1, x),
        nalgebra::DMatrix::from_vec(n, 2, z),
        Some(nalgebra::DMatrix::from_vec(n, 1, w)),
    )
    .unwrap()
    .partial_out()
    .unwrap()
}

fn dataset() -> *mut WeakivDataset {
    let (n, y, x, z, w) = fixture();
    let mut d = ptr::null_mut();
    let s = unsafe { weakiv_dataset_new(n, 1, 2, 1, y.as_ptr(), x.as_ptr(), z.as_ptr(), w.as_ptr(), &mut d) };
    assert_eq!(s, WeakivStatus::Ok);
    assert!(!d.is_null());
    d
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        weakiv_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn estimates_match_core() {
    let d = dataset();
    let reference = reference();
    for (method, expected) in [
        (WeakivMethod::TwoSls, estimate_2sls(&reference).unwrap()),
        (WeakivMethod::Liml, estimate_liml(&reference).unwrap()),
    ] {
        let mut e = ptr::null_mut();
        assert_eq!(unsafe { weakiv_estimate(d, method, 0.0, &mut e) }, WeakivStatus::Ok);
        assert_eq!(unsafe { weakiv_estimate_len(e) }, 1);
        let (mut beta, mut se, mut alpha) = (0.0, 0.0, -1.0);
        assert_eq!(unsafe { weakiv_estimate_values(e, 1, &mut beta, &mut se, &mut alpha) }, WeakivStatus::Ok);
        assert_eq!(beta, expected.beta_hat[0]);
        assert_eq!(alpha, expected.alpha);
        assert!(se > 0.0);
        unsafe { weakiv_estimate_free(e) };
    }
    unsafe { weakiv_dataset_free(d) };
}

#[test]
fn kp_matches_core() {
    let d = dataset();
    let mut r = WeakivTestResult { statistic: 0.0, df: 0, p_value: 0.0, critical_value: 0.0 };
    assert_eq!(unsafe { weakiv_test(d, WeakivTest::KP, WeakivCovariance::Hc0, 0, &mut r) }, WeakivStatus::Ok);
    let expected = kp_test(&reference(), CovarianceSpec::Hc0).unwrap();
    assert_eq!(r.statistic, expected.statistic);
    assert_eq!(r.df, 1);
    assert!(r.critical_value.is_nan());

    assert_eq!(
        unsafe { weakiv_test(d, WeakivTest::EffectiveF, WeakivCovariance::NeweyWest, 2, &mut r) },
        WeakivStatus::Ok
    );
    assert!(r.p_value.is_nan());
    assert!(r.critical_value > 0.0);
    unsafe { weakiv_dataset_free(d) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let y = [1.0, 2.0, 3.0];
    let x = [1.0, 2.0, 3.0];
    let z = [1.0, 2.0, 3.0, 2.0, 4.0, 6.0];
    let mut d = ptr::null_mut();
    let s = unsafe { weakiv_dataset_new(3, 1, 2, 0, y.as_ptr(), x.as_ptr(), z.as_ptr(), ptr::null(), &mut d) };
    assert_ne!(s, WeakivStatus::Ok);
    assert!(d.is_null());
    assert!(weakiv_last_error_length() > 0);
    assert!(!last_error().is_empty());

    let s = unsafe { weakiv_dataset_new(3, 1, 1, 0, ptr::null(), x.as_ptr(), z.as_ptr(), ptr::null(), &mut d) };
    assert_eq!(s, WeakivStatus::NullPointer);

    let mut p = 0.0;
    assert_eq!(unsafe { weakiv_chi2_sf(-1.0, 1, &mut p) }, WeakivStatus::Domain);
    assert!(last_error().contains("-1"), "{}", last_error());
    assert_eq!(unsafe { weakiv_chi2_sf(3.841458820694124, 1, &mut p) }, WeakivStatus::Ok);
    assert!((p - 0.05).abs() < 1e-12);
}

#[test]
fn simulate_small_cell() {
    let mut s = std::mem::MaybeUninit::<WeakivSimulationSummary>::uninit();
    let status =
        unsafe { weakiv_simulate(WeakivDesign::Design1, 0.5, 0.0, 2, 0.5, 8.0, 120, 200, 3, 0.05, s.as_mut_ptr()) };
    assert_eq!(status, WeakivStatus::Ok);
    let s = unsafe { s.assume_init() };
    assert_eq!(s.replications_completed + s.degenerate_count, 200);
    assert!((0.0..=1.0).contains(&s.j_rate));

    let mut out = std::mem::MaybeUninit::<WeakivSimulationSummary>::uninit();
    let status =
        unsafe { weakiv_simulate(WeakivDesign::Design1, 0.5, 0.0, 1, 0.5, 8.0, 120, 10, 3, 0.05, out.as_mut_ptr()) };
    assert_eq!(status, WeakivStatus::Config);
}

fn header_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include")
}

/// Compiles and runs a C program against the generated header and shared
/// library when a C compiler is available.
#[test]
fn c_program_links_and_runs() {
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libweakiv_ffi.so");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or {} not built", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "weakiv.h"

int main(void) {
    double y[6] = {1.0, 2.1, 2.9, 4.2, 5.1, 5.8};
    double x[6] = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    double z[12] = {1.1, 1.9, 3.2, 3.9, 5.2, 5.9, 0.5, -0.2, 0.4, 0.1, -0.3, 0.6};
    WeakivDataset *d = NULL;
    if (weakiv_dataset_new(6, 1, 2, 0, y, x, z, NULL, &d) != WEAKIV_STATUS_OK) return 1;
    WeakivEstimate *e = NULL;
    if (weakiv_estimate(d, WEAKIV_METHOD_TWO_SLS, 0.0, &e) != WEAKIV_STATUS_OK) return 2;
    double beta = 0.0, se = 0.0, alpha = 0.0;
    if (weakiv_estimate_values(e, 1, &beta, &se, &alpha) != WEAKIV_STATUS_OK) return 3;
    double p = 0.0;
    if (weakiv_chi2_sf(-1.0, 1, &p) != WEAKIV_STATUS_DOMAIN) return 4;
    char msg[128];
    if (weakiv_last_error_message(msg, sizeof msg) == 0) return 5;
    printf("%.12f %s\n", beta, weakiv_version());
    weakiv_estimate_free(e);
    weakiv_dataset_free(d);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header_dir())
        .arg("-L")
        .arg(&profile_dir)
        .arg("-lweakiv_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &profile_dir).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let beta: f64 = text.split_whitespace().next().unwrap().parse().unwrap();
    assert!((beta - 1.0).abs() < 0.2, "{text}");
    assert!(text.trim_end().ends_with(env!("CARGO_PKG_VERSION")));
}
