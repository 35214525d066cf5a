use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fedclust_ffi::*;

fn last_error() -> String {
    let p = fc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn pseudo_labels_have_unit_rows_and_balanced_plan() {
    let (n, k) = (6, 3);
    let scores: Vec<f64> = (0..n * k).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
    let mut q = vec![0.0; n * k];
    let mut xi = vec![0.0; n * k];
    let mut converged = -1;
    let st = unsafe {
        fc_pseudo_labels(
            scores.as_ptr(),
            n,
            k,
            0.1,
            1000,
            1e-9,
            q.as_mut_ptr(),
            xi.as_mut_ptr(),
            &mut converged,
        )
    };
    assert_eq!(st, FcStatus::Ok);
    assert_eq!(converged, 1);
    for i in 0..n {
        assert!((q[i * k..(i + 1) * k].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for j in 0..k {
        let col: f64 = (0..n).map(|i| xi[i * k + j]).sum();
        assert!((col - 2.0).abs() < 1e-6);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut q = vec![0.0; 4];
    let st = unsafe {
        fc_pseudo_labels(
            ptr::null(),
            2,
            2,
            0.1,
            10,
            1e-6,
            q.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FcStatus::InvalidArgument);
    assert!(last_error().contains("scores"));

    let scores = [0.0; 4];
    let st = unsafe {
        fc_pseudo_labels(
            scores.as_ptr(),
            2,
            2,
            -1.0,
            10,
            1e-6,
            q.as_mut_ptr(),
            ptr::null_mut(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, FcStatus::InvalidArgument);
    assert!(last_error().contains("epsilon"));

    let path = CString::new("/nonexistent/x.fstc").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { fc_dataset_load(path.as_ptr(), &mut ds) }, FcStatus::Io);
    assert!(ds.is_null());

    let mut acc = 0.0;
    let y = [0u32, 1, 2];
    assert_eq!(
        unsafe { fc_accuracy(y.as_ptr(), y.as_ptr(), 3, 2, &mut acc) },
        FcStatus::InvalidArgument
    );

    assert_eq!(
        unsafe { fc_accuracy(y.as_ptr(), y.as_ptr(), 3, 3, &mut acc) },
        FcStatus::Ok
    );
    assert!(fc_last_error().is_null());
}

#[test]
fn metrics_match_known_values() {
    let y = [0u32, 0, 1, 1];
    let y_hat = [1u32, 1, 0, 0];
    let (mut acc, mut v) = (0.0, 0.0);
    unsafe {
        assert_eq!(fc_accuracy(y.as_ptr(), y_hat.as_ptr(), 4, 2, &mut acc), FcStatus::Ok);
        assert_eq!(fc_nmi(y.as_ptr(), y_hat.as_ptr(), 4, &mut v), FcStatus::Ok);
    }
    assert_eq!((acc, v), (1.0, 1.0));
}

#[test]
fn sample_weights_drop_the_far_residual() {
    let (n, k) = (40, 2);
    let mut q = vec![0.0; n * k];
    for i in 0..n {
        q[i * k] = 0.01 * ((i % 7) as f64 - 3.0);
        q[i * k + 1] = 0.01 * ((i % 5) as f64 - 2.0);
    }
    q[0] = 3.0;
    q[1] = -3.0;
    let o = vec![0.0; n * k];
    let mut w = vec![-1.0; n];
    assert_eq!(
        unsafe { fc_sample_weights(q.as_ptr(), o.as_ptr(), n, k, 3, w.as_mut_ptr()) },
        FcStatus::Ok
    );
    assert_eq!(w[0], 0.0);
    assert!(w[1..].iter().all(|&v| v >= 0.5), "{w:?}");
}

#[test]
fn dataset_handles_and_kmeans() {
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in 0..30u32 {
        let c = i % 3;
        x.extend([10.0 * c as f64 + 0.01 * i as f64, -5.0 * c as f64]);
        labels.push(c);
    }
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(
            fc_dataset_new(x.as_ptr(), 30, 2, labels.as_ptr(), &mut ds),
            FcStatus::Ok
        );
        assert_eq!((fc_dataset_rows(ds), fc_dataset_dim(ds)), (30, 2));
        let mut assign = vec![0u32; 30];
        let mut inertia = -1.0;
        assert_eq!(fc_kmeans(ds, 3, 1, 5, assign.as_mut_ptr(), &mut inertia), FcStatus::Ok);
        assert!(inertia >= 0.0);
        let mut acc = 0.0;
        assert_eq!(
            fc_accuracy(labels.as_ptr(), assign.as_ptr(), 30, 3, &mut acc),
            FcStatus::Ok
        );
        assert_eq!(acc, 1.0);
        fc_dataset_free(ds);
        fc_dataset_free(ptr::null_mut());
        assert_eq!(fc_dataset_rows(ptr::null()), 0);
    }
}

fn write_blobs(dir: &Path) -> PathBuf {
    use fedclust::datasets::{save_dataset, synth_blobs};
    let ds = synth_blobs(4, 400, 8, 8.0, 1.0, &mut fedclust::numerics::Rng::new(5)).unwrap();
    let path = dir.join("blobs.fstc");
    save_dataset(&ds, &path).unwrap();
    path
}

#[test]
fn run_handle_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_blobs(dir.path());
    let toml = format!(
        "dataset = {:?}\nk = 4\nm = 2\nrounds = 2\nlocal_iters = 5\nbatch_size = 50\nhead_lr = 0.02\noutput_dir = {:?}\n",
        data.display().to_string(),
        dir.path().join("runs").display().to_string()
    );
    let toml = CString::new(toml).unwrap();
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(fc_run(toml.as_ptr(), &mut run), FcStatus::Ok, "{}", last_error());
        let (mut acc, mut v) = (-1.0, -1.0);
        assert_eq!(fc_run_accuracy(run, &mut acc), FcStatus::Ok);
        assert_eq!(fc_run_nmi(run, &mut v), FcStatus::Ok);
        assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&v));
        let run_dir = CStr::from_ptr(fc_run_dir(run)).to_str().unwrap().to_string();
        assert!(Path::new(&run_dir).join("metrics.json").is_file());
        fc_run_free(run);
    }

    let bad = CString::new("k = 4\n").unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { fc_run(bad.as_ptr(), &mut run) }, FcStatus::Config);
    assert!(run.is_null());
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fedclust.h")).unwrap();
    for name in [
        "fc_last_error",
        "fc_version",
        "fc_dataset_load",
        "fc_dataset_new",
        "fc_dataset_rows",
        "fc_dataset_dim",
        "fc_dataset_free",
        "fc_pseudo_labels",
        "fc_sample_weights",
        "fc_accuracy",
        "fc_nmi",
        "fc_kmeans",
        "fc_run",
        "fc_run_accuracy",
        "fc_run_nmi",
        "fc_run_dir",
        "fc_run_free",
        "typedef struct FcDataset FcDataset",
        "typedef struct FcRun FcRun",
        "FC_STATUS_DIVERGENCE = 5",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let version = unsafe { CStr::from_ptr(fc_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

/// Compiles and runs a small C program against the static library.
#[test]
fn c_program_links_against_the_static_library() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libfedclust_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "fedclust.h"
int main(void) {
    unsigned y[4] = {0, 0, 1, 1}, p[4] = {1, 1, 0, 0};
    double acc = 0;
    if (fc_accuracy(y, p, 4, 2, &acc) != FC_STATUS_OK || acc != 1.0) return 1;
    if (fc_accuracy(NULL, p, 4, 2, &acc) != FC_STATUS_INVALID_ARGUMENT) return 2;
    if (fc_last_error() == NULL) return 3;
    printf("%s\n", fc_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}

fn which_cc() -> Result<String, ()> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_string());
    Command::new(&cc).arg("--version").output().map(|_| cc).map_err(|_| ())
}
