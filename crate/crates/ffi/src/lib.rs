//! C ABI over `mlsa4rec`: an opaque model handle, status codes and a
//! thread-local last-error message.
//!
//! Every function returns an [`MlsaStatus`]; on failure the message is
//! available from [`mlsa_last_error`] until the next failing call on the same
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mlsa4rec::config::{load_model, save_model};
use mlsa4rec::metrics::metrics_at_k;
use mlsa4rec::model::{ModelConfig, Variant};
use mlsa4rec::MlsaError;

/// Opaque model handle.
pub struct MlsaModel {
    inner: mlsa4rec::model::MlsaModel<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlsaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    Data = 7,
    NonFinite = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlsaVariant {
    Default = 0,
    V1 = 1,
    V2 = 2,
    V3 = 3,
    V4 = 4,
}

/// Architecture hyperparameters; fill with `mlsa_model_config_default` first.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MlsaModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub interests: usize,
    pub heads: usize,
    pub layers: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub variant: MlsaVariant,
    pub skip: bool,
    pub per_head_theta: bool,
    pub fresh_mlp1: bool,
    pub mlp_depth: usize,
    pub freeze_padding: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nulls removed"));
}

fn status_of(e: &MlsaError) -> MlsaStatus {
    match e {
        MlsaError::Shape(_) => MlsaStatus::Shape,
        MlsaError::Config(_) | MlsaError::Usage(_) => MlsaStatus::Config,
        MlsaError::Io { .. } => MlsaStatus::Io,
        MlsaError::Checkpoint(_) => MlsaStatus::Checkpoint,
        MlsaError::Data(_) | MlsaError::Parse { .. } | MlsaError::Split(_) => MlsaStatus::Data,
        MlsaError::NonFinite(_) => MlsaStatus::NonFinite,
        MlsaError::Domain(_) | MlsaError::GradCheck(_) | MlsaError::Bench(_) => MlsaStatus::InvalidArgument,
    }
}

struct Fail(MlsaStatus, String);

impl From<MlsaError> for Fail {
    fn from(e: MlsaError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MlsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MlsaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            MlsaStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(MlsaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(MlsaStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

fn variant_of(v: MlsaVariant) -> Variant {
    match v {
        MlsaVariant::Default => Variant::Default,
        MlsaVariant::V1 => Variant::V1,
        MlsaVariant::V2 => Variant::V2,
        MlsaVariant::V3 => Variant::V3,
        MlsaVariant::V4 => Variant::V4,
    }
}

fn to_model_config(c: &MlsaModelConfig) -> ModelConfig {
    ModelConfig {
        vocab_size: c.vocab_size,
        max_len: c.max_len,
        d_model: c.d_model,
        d_state: c.d_state,
        interests: c.interests,
        heads: c.heads,
        layers: c.layers,
        expand: c.expand,
        conv_kernel: c.conv_kernel,
        dropout: c.dropout,
        variant: variant_of(c.variant),
        skip: c.skip,
        per_head_theta: c.per_head_theta,
        fresh_mlp1: c.fresh_mlp1,
        mlp_depth: c.mlp_depth,
        freeze_padding: c.freeze_padding,
    }
}

/// Message of the last failure on this thread; empty if none. Owned by the library.
#[no_mangle]
pub extern "C" fn mlsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mlsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the default configuration (vocab_size 2: padding plus one item).
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_config_default(out: *mut MlsaModelConfig) -> MlsaStatus {
    guard(|| {
        non_null(out, "out")?;
        let d = ModelConfig::default();
        out.write(MlsaModelConfig {
            vocab_size: d.vocab_size,
            max_len: d.max_len,
            d_model: d.d_model,
            d_state: d.d_state,
            interests: d.interests,
            heads: d.heads,
            layers: d.layers,
            expand: d.expand,
            conv_kernel: d.conv_kernel,
            dropout: d.dropout,
            variant: MlsaVariant::Default,
            skip: d.skip,
            per_head_theta: d.per_head_theta,
            fresh_mlp1: d.fresh_mlp1,
            mlp_depth: d.mlp_depth,
            freeze_padding: d.freeze_padding,
        });
        Ok(())
    })
}

/// Freshly initialized model. Free it with `mlsa_model_free`.
///
/// # Safety
/// `config` must be null or point to a valid config; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_new(
    config: *const MlsaModelConfig,
    seed: u64,
    out: *mut *mut MlsaModel,
) -> MlsaStatus {
    guard(|| {
        non_null(config, "config")?;
        non_null(out, "out")?;
        out.write(ptr::null_mut());
        let inner = mlsa4rec::model::MlsaModel::new(to_model_config(&*config), seed)?;
        out.write(Box::into_raw(Box::new(MlsaModel { inner })));
        Ok(())
    })
}

/// Loads a model saved by `mlsa_model_save` or `mlsa4rec train --checkpoint`.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_load(path: *const c_char, out: *mut *mut MlsaModel) -> MlsaStatus {
    guard(|| {
        non_null(out, "out")?;
        out.write(ptr::null_mut());
        let inner = load_model(path_arg(path)?)?;
        out.write(Box::into_raw(Box::new(MlsaModel { inner })));
        Ok(())
    })
}

/// Writes the checkpoint to `path` and its configuration to `path` + ".config".
///
/// # Safety
/// `model` must be null or a live handle; `path` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_save(model: *const MlsaModel, path: *const c_char) -> MlsaStatus {
    guard(|| {
        non_null(model, "model")?;
        save_model(&(*model).inner, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of item ids including the padding id 0.
///
/// # Safety
/// `model` must be null or a live handle; `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_vocab_size(model: *const MlsaModel, out: *mut usize) -> MlsaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        out.write((*model).inner.config().vocab_size);
        Ok(())
    })
}

/// Next-item logits for `batch` sequences of `seq_len` ids stored row after row.
/// `out` receives `batch * vocab_size` floats; `out_len` must equal that.
///
/// # Safety
/// `ids` must be valid for `batch * seq_len` reads and `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_score(
    model: *const MlsaModel,
    ids: *const usize,
    batch: usize,
    seq_len: usize,
    out: *mut f32,
    out_len: usize,
) -> MlsaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(ids, "ids")?;
        non_null(out, "out")?;
        let m = &(*model).inner;
        let vocab = m.config().vocab_size;
        if batch == 0 || seq_len == 0 {
            return Err(Fail(MlsaStatus::InvalidArgument, "batch and seq_len must be >= 1".into()));
        }
        if out_len != batch * vocab {
            return Err(Fail(MlsaStatus::InvalidArgument, format!("out_len {out_len}, need {}", batch * vocab)));
        }
        let ids = std::slice::from_raw_parts(ids, batch * seq_len);
        let scores = m.scores(ids, seq_len)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(scores.data());
        Ok(())
    })
}

/// The `k` highest-scoring item ids for one sequence, best first; padding is
/// never returned and ties go to the smaller id. Scores are written when
/// `out_scores` is not null.
///
/// # Safety
/// `ids` must be valid for `seq_len` reads, `out_items` (and `out_scores` if
/// non-null) for `k` writes.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_top_k(
    model: *const MlsaModel,
    ids: *const usize,
    seq_len: usize,
    k: usize,
    out_items: *mut usize,
    out_scores: *mut f32,
) -> MlsaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(ids, "ids")?;
        non_null(out_items, "out_items")?;
        let m = &(*model).inner;
        let vocab = m.config().vocab_size;
        if seq_len == 0 || k == 0 || k >= vocab {
            return Err(Fail(
                MlsaStatus::InvalidArgument,
                format!("need seq_len >= 1 and 1 <= k < {vocab}, got seq_len {seq_len}, k {k}"),
            ));
        }
        let scores = m.scores(std::slice::from_raw_parts(ids, seq_len), seq_len)?;
        let s = scores.data();
        let mut order: Vec<usize> = (1..vocab).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let items = std::slice::from_raw_parts_mut(out_items, k);
        items.copy_from_slice(&order[..k]);
        if !out_scores.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_scores, k);
            for (d, &i) in dst.iter_mut().zip(items.iter()) {
                *d = s[i];
            }
        }
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mlsa_model_free(model: *mut MlsaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// HR, NDCG and MRR at cutoff `k` for a target ranked `rank` (1-based).
///
/// # Safety
/// Each output must be null or valid for writes; null outputs are skipped.
#[no_mangle]
pub unsafe extern "C" fn mlsa_metrics_at_k(
    rank: usize,
    k: usize,
    hr: *mut f64,
    ndcg: *mut f64,
    mrr: *mut f64,
) -> MlsaStatus {
    guard(|| {
        if rank == 0 {
            return Err(Fail(MlsaStatus::InvalidArgument, "rank is 1-based".into()));
        }
        let m = metrics_at_k(rank, k);
        for (p, v) in [(hr, m.hr), (ndcg, m.ndcg), (mrr, m.mrr)] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}
