//! C ABI over `prunelab`.
//!
//! Every function returns a [`PrunelabStatus`]. On failure the message is kept
//! per thread and can be fetched with [`prunelab_last_error_message`]. Objects
//! are opaque handles created by `*_new` / `*_load` and released by `*_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use prunelab::analysis::{layer_cosine_sim, mask_diff, model_movement};
use prunelab::experiment::{run_scenario, ExperimentConfig};
use prunelab::pruning::{magnitude_threshold, MaskSet, PruneMode, PruneScope, Pruner};
use prunelab::{Error, Model, ModelConfig, RngState, Tensor2D};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrunelabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Corrupt = 5,
    Incompatible = 6,
    Config = 7,
    Training = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrunelabScope {
    MatrixLocal = 0,
    Global = 1,
    PerHead = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrunelabModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub init_std: f32,
}

impl From<&ModelConfig> for PrunelabModelConfig {
    fn from(c: &ModelConfig) -> Self {
        Self { num_layers: c.num_layers, hidden: c.hidden, num_heads: c.num_heads, ffn: c.ffn, vocab: c.vocab, max_len: c.max_len, dropout: c.dropout, init_std: c.init_std }
    }
}

impl From<&PrunelabModelConfig> for ModelConfig {
    fn from(c: &PrunelabModelConfig) -> Self {
        Self { num_layers: c.num_layers, hidden: c.hidden, num_heads: c.num_heads, ffn: c.ffn, vocab: c.vocab, max_len: c.max_len, dropout: c.dropout, init_std: c.init_std }
    }
}

/// Encoder weights, optionally with a classification head.
pub struct PrunelabModel(Model);

/// One keep/prune mask per prunable matrix.
pub struct PrunelabMasks(MaskSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PrunelabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::LengthMismatch { .. } | Error::InvalidParameter(_) | Error::TokenOutOfRange { .. } | Error::SequenceTooLong { .. } | Error::EmptyPrunableSet => {
                PrunelabStatus::InvalidArgument
            }
            Error::NotFound(_) => PrunelabStatus::NotFound,
            Error::Io { .. } => PrunelabStatus::Io,
            Error::Corrupt(_) | Error::Duplicate(_) | Error::Json(_) | Error::Results(_) => PrunelabStatus::Corrupt,
            Error::Incompatible(_) | Error::StaleTrace(_) => PrunelabStatus::Incompatible,
            Error::Config(_) => PrunelabStatus::Config,
            Error::Divergence { .. } => PrunelabStatus::Training,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: PrunelabStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `body`, converting errors and panics into a status and a stored message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PrunelabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PrunelabStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| panic.downcast_ref::<String>().cloned()).unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            PrunelabStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| fail(PrunelabStatus::NullPointer, format!("{what} is null")))
}

unsafe fn get_mut<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| fail(PrunelabStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string(ptr: *const c_char, what: &str) -> Result<String, Failure> {
    if ptr.is_null() {
        return Err(fail(PrunelabStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr).to_str().map(str::to_owned).map_err(|_| fail(PrunelabStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(PrunelabStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(fail(PrunelabStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    *get_mut(out, what)? = value;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prunelab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the buffer size needed for
/// the whole message including the terminator, or 0 when there is no error.
#[no_mangle]
pub unsafe extern "C" fn prunelab_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = (bytes.len() - 1).min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Freshly initialized encoder without a classification head.
#[no_mangle]
pub unsafe extern "C" fn prunelab_model_new(config: *const PrunelabModelConfig, seed: u64, out: *mut *mut PrunelabModel) -> PrunelabStatus {
    guard(|| {
        let cfg = ModelConfig::from(get(config, "config")?);
        let model = Model::new(cfg, &mut RngState::new(seed))?;
        put(out, Box::into_raw(Box::new(PrunelabModel(model))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn prunelab_model_load(path: *const c_char, out: *mut *mut PrunelabModel) -> PrunelabStatus {
    guard(|| {
        let model = Model::load(PathBuf::from(string(path, "path")?))?;
        put(out, Box::into_raw(Box::new(PrunelabModel(model))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn prunelab_model_save(model: *const PrunelabModel, path: *const c_char) -> PrunelabStatus {
    guard(|| Ok(get(model, "model")?.0.save(PathBuf::from(string(path, "path")?))?))
}

#[no_mangle]
pub unsafe extern "C" fn prunelab_model_free(model: *mut PrunelabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn prunelab_model_config(model: *const PrunelabModel, out: *mut PrunelabModelConfig) -> PrunelabStatus {
    guard(|| put(out, PrunelabModelConfig::from(get(model, "model")?.0.config()), "out"))
}

/// Shape of the parameter tensor called `name`.
#[no_mangle]
pub unsafe extern "C" fn prunelab_model_param_shape(model: *const PrunelabModel, name: *const c_char, rows: *mut usize, cols: *mut usize) -> PrunelabStatus {
    guard(|| {
        let (r, c) = get(model, "model")?.0.param_by_name(&string(name, "name")?)?.shape();
        put(rows, r, "rows")?;
        put(cols, c, "cols")
    })
}

/// Copies the row-major values of parameter `name` into `buf`, which must
/// hold exactly rows * cols floats.
#[no_mangle]
pub unsafe extern "C" fn prunelab_model_param_copy(model: *const PrunelabModel, name: *const c_char, buf: *mut f32, len: usize) -> PrunelabStatus {
    guard(|| {
        let t = get(model, "model")?.0.param_by_name(&string(name, "name")?)?;
        if len != t.len() {
            return Err(fail(PrunelabStatus::BufferTooSmall, format!("buffer holds {len} values, parameter has {}", t.len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(t.data());
        Ok(())
    })
}

/// One-shot magnitude pruning of every prunable matrix to `sparsity`. The
/// pruned weights are set to zero and the masks are returned in `out`.
#[no_mangle]
pub unsafe extern "C" fn prunelab_model_prune(model: *mut PrunelabModel, sparsity: f64, scope: PrunelabScope, out: *mut *mut PrunelabMasks) -> PrunelabStatus {
    guard(|| {
        let model = &mut get_mut(model, "model")?.0;
        get(out.cast_const(), "out")?;
        let scope = match scope {
            PrunelabScope::MatrixLocal => PruneScope::MatrixLocal,
            PrunelabScope::Global => PruneScope::Global,
            PrunelabScope::PerHead => PruneScope::PerHead { num_heads: model.config().num_heads },
        };
        let mut pruner = Pruner::new(model, PruneMode::Masked, scope, None, &RngState::new(0))?;
        pruner.prune_to(model, sparsity)?;
        put(out, Box::into_raw(Box::new(PrunelabMasks(pruner.masks().clone()))), "out")
    })
}

/// Pooled sort-order movement from `before` to `after`, in percent of matrix size.
#[no_mangle]
pub unsafe extern "C" fn prunelab_model_movement(before: *const PrunelabModel, after: *const PrunelabModel, mean: *mut f64, std: *mut f64) -> PrunelabStatus {
    guard(|| {
        let (a, b) = (&get(before, "before")?.0, &get(after, "after")?.0);
        let m = model_movement(a, b, &a.prunable_set())?;
        put(mean, m.pooled.mean, "mean")?;
        put(std, m.pooled.std, "std")
    })
}

/// Per-layer cosine similarity of mean-pooled features. `tokens` holds the
/// sequences back to back with lengths in `lengths`; `out` receives one value
/// per layer and must have room for `num_layers` values.
#[no_mangle]
pub unsafe extern "C" fn prunelab_model_cosine(
    a: *const PrunelabModel,
    b: *const PrunelabModel,
    tokens: *const u32,
    lengths: *const usize,
    num_sequences: usize,
    out: *mut f64,
    out_len: usize,
) -> PrunelabStatus {
    guard(|| {
        let (a, b) = (&get(a, "a")?.0, &get(b, "b")?.0);
        let lengths = slice(lengths, num_sequences, "lengths")?;
        let total = lengths.iter().sum();
        let tokens = slice(tokens, total, "tokens")?;
        let mut seqs = Vec::with_capacity(num_sequences);
        let mut at = 0;
        for &n in lengths {
            seqs.push(tokens[at..at + n].to_vec());
            at += n;
        }
        let report = layer_cosine_sim(a, b, &seqs)?;
        if out_len < report.per_layer.len() {
            return Err(fail(PrunelabStatus::BufferTooSmall, format!("need room for {} layers", report.per_layer.len())));
        }
        slice_mut(out, report.per_layer.len(), "out")?.copy_from_slice(&report.per_layer);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prunelab_masks_load(path: *const c_char, out: *mut *mut PrunelabMasks) -> PrunelabStatus {
    guard(|| {
        let (masks, _) = MaskSet::load(PathBuf::from(string(path, "path")?))?;
        put(out, Box::into_raw(Box::new(PrunelabMasks(masks))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn prunelab_masks_free(masks: *mut PrunelabMasks) {
    if !masks.is_null() {
        drop(Box::from_raw(masks));
    }
}

/// Number of matrices covered by the mask set.
#[no_mangle]
pub unsafe extern "C" fn prunelab_masks_count(masks: *const PrunelabMasks, out: *mut usize) -> PrunelabStatus {
    guard(|| put(out, get(masks, "masks")?.0.masks.len(), "out"))
}

/// Fraction of pruned positions over all matrices.
#[no_mangle]
pub unsafe extern "C" fn prunelab_masks_sparsity(masks: *const PrunelabMasks, out: *mut f64) -> PrunelabStatus {
    guard(|| put(out, get(masks, "masks")?.0.sparsity(), "out"))
}

/// Fraction of positions whose pruned/kept status differs between two mask
/// sets of equal sparsity.
#[no_mangle]
pub unsafe extern "C" fn prunelab_masks_diff(a: *const PrunelabMasks, b: *const PrunelabMasks, out: *mut f64) -> PrunelabStatus {
    guard(|| put(out, mask_diff(&get(a, "a")?.0, &get(b, "b")?.0)?.overall, "out"))
}

/// Largest magnitude removed when pruning `values` to `sparsity`.
#[no_mangle]
pub unsafe extern "C" fn prunelab_magnitude_threshold(values: *const f32, len: usize, sparsity: f64, out: *mut f32) -> PrunelabStatus {
    guard(|| {
        let t = Tensor2D::from_vec(1, len, slice(values, len, "values")?.to_vec())?;
        put(out, magnitude_threshold(&t, sparsity)?, "out")
    })
}

/// Runs every cell of the experiment in the TOML file at `config_path`,
/// writing results under `out_dir`.
#[no_mangle]
pub unsafe extern "C" fn prunelab_run_experiment(config_path: *const c_char, out_dir: *const c_char, workers: usize) -> PrunelabStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(PathBuf::from(string(config_path, "config_path")?))?;
        run_scenario(&cfg, &PathBuf::from(string(out_dir, "out_dir")?), workers.max(1))?;
        Ok(())
    })
}
