//! Compiles and links a C program against the generated header and static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "prunelab.h"

int main(void) {
    PrunelabModelConfig cfg = {2, 16, 4, 32, 40, 16, 0.1f, 0.1f};
    PrunelabModel *model = NULL;
    if (prunelab_model_new(&cfg, 7, &model) != PRUNELAB_STATUS_OK) return 1;
    PrunelabMasks *masks = NULL;
    if (prunelab_model_prune(model, 0.25, PRUNELAB_SCOPE_GLOBAL, &masks) != PRUNELAB_STATUS_OK) return 2;
    double sparsity = 0.0;
    prunelab_masks_sparsity(masks, &sparsity);
    if (prunelab_model_load("/nonexistent.ckpt", &model) != PRUNELAB_STATUS_IO) return 3;
    char msg[256];
    if (prunelab_last_error_message(msg, sizeof msg) == 0 || strstr(msg, "nonexistent") == NULL) return 4;
    printf("%s %.3f\n", prunelab_version(), sparsity);
    prunelab_masks_free(masks);
    prunelab_model_free(model);
    return 0;
}
"#;

fn target_profile_dir() -> PathBuf {
    // CARGO_TARGET_TMPDIR is <target>/tmp; the library sits in <target>/<profile>.
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().to_path_buf();
    let exe = std::env::current_exe().unwrap();
    let profile = exe.parent().and_then(Path::parent).unwrap();
    if profile.starts_with(&target) {
        profile.to_path_buf()
    } else {
        target.join("debug")
    }
}

#[test]
fn c_program_builds_and_runs() {
    let lib = target_profile_dir().join("libprunelab_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("{} 0.250", env!("CARGO_PKG_VERSION")));
}
