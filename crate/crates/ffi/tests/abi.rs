use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mlsa4rec_ffi::*;

fn toy_config() -> MlsaModelConfig {
    let mut c = std::mem::MaybeUninit::uninit();
    assert_eq!(unsafe { mlsa_model_config_default(c.as_mut_ptr()) }, MlsaStatus::Ok);
    let mut c = unsafe { c.assume_init() };
    c.vocab_size = 30;
    c.max_len = 6;
    c.d_model = 8;
    c.d_state = 4;
    c.interests = 2;
    c
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mlsa_last_error()) }.to_string_lossy().into_owned()
}

fn new_model(c: &MlsaModelConfig) -> *mut MlsaModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mlsa_model_new(c, 3, &mut m) }, MlsaStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

#[test]
fn create_score_rank_and_free() {
    let m = new_model(&toy_config());
    let mut vocab = 0;
    assert_eq!(unsafe { mlsa_model_vocab_size(m, &mut vocab) }, MlsaStatus::Ok);
    assert_eq!(vocab, 30);

    let ids = [0usize, 0, 4, 5, 6, 7, 1, 2, 3, 4, 5, 6];
    let mut scores = vec![0f32; 2 * vocab];
    let st = unsafe { mlsa_model_score(m, ids.as_ptr(), 2, 6, scores.as_mut_ptr(), scores.len()) };
    assert_eq!(st, MlsaStatus::Ok);
    assert!(scores.iter().all(|s| s.is_finite()));

    let (mut items, mut top) = ([0usize; 5], [0f32; 5]);
    let st = unsafe { mlsa_model_top_k(m, ids.as_ptr(), 6, 5, items.as_mut_ptr(), top.as_mut_ptr()) };
    assert_eq!(st, MlsaStatus::Ok);
    let first = &scores[..vocab];
    let mut brute: Vec<usize> = (1..vocab).collect();
    brute.sort_by(|&a, &b| first[b].total_cmp(&first[a]).then(a.cmp(&b)));
    assert_eq!(&items[..], &brute[..5]);
    assert!(top.windows(2).all(|w| w[0] >= w[1]));
    assert!(!items.contains(&0));

    unsafe { mlsa_model_free(m) };
    unsafe { mlsa_model_free(ptr::null_mut()) };
}

#[test]
fn errors_set_status_and_message() {
    let m = new_model(&toy_config());
    let ids = [1usize; 6];
    let mut out = vec![0f32; 7];
    let st = unsafe { mlsa_model_score(m, ids.as_ptr(), 1, 6, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, MlsaStatus::InvalidArgument);
    assert!(last_error().contains("out_len"));

    let bad = [1usize, 2, 99, 3, 4, 5];
    let mut out = vec![0f32; 30];
    let st = unsafe { mlsa_model_score(m, bad.as_ptr(), 1, 6, out.as_mut_ptr(), 30) };
    assert_eq!(st, MlsaStatus::Data, "{}", last_error());

    let st = unsafe { mlsa_model_score(ptr::null(), ids.as_ptr(), 1, 6, out.as_mut_ptr(), 30) };
    assert_eq!(st, MlsaStatus::NullPointer);

    let mut item = [0usize; 1];
    let st = unsafe { mlsa_model_top_k(m, ids.as_ptr(), 6, 30, item.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, MlsaStatus::InvalidArgument);

    let mut c = toy_config();
    c.heads = 3;
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mlsa_model_new(&c, 1, &mut h) }, MlsaStatus::Config);
    assert!(h.is_null());
    assert!(last_error().contains("heads"));

    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(unsafe { mlsa_model_load(missing.as_ptr(), &mut h) }, MlsaStatus::Io);
    unsafe { mlsa_model_free(m) };
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
    let mut c = toy_config();
    c.variant = MlsaVariant::V4;
    let m = new_model(&c);
    assert_eq!(unsafe { mlsa_model_save(m, path.as_ptr()) }, MlsaStatus::Ok, "{}", last_error());
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { mlsa_model_load(path.as_ptr(), &mut back) }, MlsaStatus::Ok, "{}", last_error());
    let ids = [0usize, 1, 2, 3, 4, 5];
    let (mut a, mut b) = (vec![0f32; 30], vec![0f32; 30]);
    unsafe {
        assert_eq!(mlsa_model_score(m, ids.as_ptr(), 1, 6, a.as_mut_ptr(), 30), MlsaStatus::Ok);
        assert_eq!(mlsa_model_score(back, ids.as_ptr(), 1, 6, b.as_mut_ptr(), 30), MlsaStatus::Ok);
        mlsa_model_free(m);
        mlsa_model_free(back);
    }
    assert_eq!(a, b);
}

#[test]
fn metric_closed_forms() {
    let (mut hr, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { mlsa_metrics_at_k(3, 10, &mut hr, &mut ndcg, &mut mrr) }, MlsaStatus::Ok);
    assert_eq!((hr, ndcg), (1.0, 0.5));
    assert!((mrr - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(unsafe { mlsa_metrics_at_k(11, 10, &mut hr, ptr::null_mut(), ptr::null_mut()) }, MlsaStatus::Ok);
    assert_eq!(hr, 0.0);
    assert_eq!(unsafe { mlsa_metrics_at_k(0, 10, &mut hr, &mut ndcg, &mut mrr) }, MlsaStatus::InvalidArgument);
    let v = unsafe { CStr::from_ptr(mlsa_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Directory holding the cdylib built alongside this test binary.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|deps| deps.parent()).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = lib_dir();
    assert!(lib.join("libmlsa4rec_ffi.so").exists(), "cdylib missing in {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "mlsa4rec.h"
int main(void) {
    MlsaModelConfig c;
    if (mlsa_model_config_default(&c) != MLSA_STATUS_OK) return 10;
    c.vocab_size = 12; c.max_len = 4; c.d_model = 8; c.d_state = 4; c.interests = 2;
    MlsaModel *m = NULL;
    if (mlsa_model_new(&c, 1, &m) != MLSA_STATUS_OK) return 11;
    size_t ids[4] = {0, 3, 4, 5};
    size_t top[3];
    if (mlsa_model_top_k(m, ids, 4, 3, top, NULL) != MLSA_STATUS_OK) return 12;
    c.heads = 3;
    MlsaModel *bad = NULL;
    if (mlsa_model_new(&c, 1, &bad) != MLSA_STATUS_CONFIG || bad != NULL) return 13;
    printf("%zu %zu %zu %s\n", top[0], top[1], top[2], mlsa_version());
    mlsa_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let cc = Command::new("cc")
        .arg(&src)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg("-L")
        .arg(&lib)
        .arg("-lmlsa4rec_ffi")
        .arg("-o")
        .arg(&exe)
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", &lib).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let text = String::from_utf8(run.stdout).unwrap();
    let fields: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(fields.len(), 4);
    assert!(fields[..3].iter().all(|f| f.parse::<usize>().is_ok_and(|i| (1..12).contains(&i))));
}
