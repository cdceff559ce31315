//! Builds tests/smoke.c against the checked-in header and the cdylib.

use std::path::{Path, PathBuf};
use std::process::Command;

fn target_dir() -> PathBuf {
    // target/<profile>/deps/c_smoke-xxxx
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

#[test]
fn header_is_checked_in_and_current() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/prism.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in
        ["prism_mesh_check_access", "prism_gateway_open", "PRISM_STATUS_NULL_ARGUMENT", "typedef struct PrismMesh"]
    {
        assert!(text.contains(sym), "{sym} missing from {}", header.display());
    }
}

#[test]
fn c_program_links_and_runs() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = target_dir();
    let lib = dir.join("libprism_ffi.so");
    if !lib.exists() {
        // cargo builds the cdylib for `cargo test -p prism-ffi`, not always for
        // filtered runs of the whole workspace
        let status = Command::new(env!("CARGO")).args(["build", "-p", "prism-ffi", "--lib"]).status().unwrap();
        assert!(status.success());
    }
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let cc = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&dir)
        .arg("-lprism_ffi")
        .arg(format!("-Wl,-rpath,{}", dir.display()))
        .arg("-o")
        .arg(&bin)
        .output()
        .unwrap();
    assert!(cc.status.success(), "cc failed:\n{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(
        run.status.success(),
        "smoke failed:\n{}{}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
