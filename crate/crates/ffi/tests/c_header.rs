//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "ternary_spike.h"

int main(void) {
    double joules = 0.0, bits = 0.0;
    size_t shape[3] = {16, 8, 8};
    char msg[128];
    if (ts_energy(3.54e6, 79.21e6, 0.23e6, &joules) != TS_STATUS_OK) return 1;
    if (ts_capacity_bits(shape, 3, 2, &bits) != TS_STATUS_OK || bits != 1024.0) return 2;
    if (ts_network_load("/nonexistent", NULL) != TS_STATUS_NULL_POINTER) return 3;
    if (ts_last_error_message(msg, sizeof msg) == 0 || strstr(msg, "null") == NULL) return 4;
    printf("%.3f\n", joules * 1e6);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests/ binaries live in <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_is_current() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ternary_spike.h")).unwrap();
    for f in [
        "ts_last_error_message",
        "ts_version",
        "ts_network_load",
        "ts_network_free",
        "ts_network_input_len",
        "ts_network_num_classes",
        "ts_network_forward",
        "ts_convert_checkpoint",
        "ts_energy",
        "ts_energy_with_costs",
        "ts_implied_ann_additions",
        "ts_capacity_bits",
        "ts_entropy_bits",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct TsNetwork TsNetwork;"));
}

#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libternary_spike_ffi.a");
    assert!(lib.is_file(), "static library not built at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    let exe = tmp.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "51.200");
}
