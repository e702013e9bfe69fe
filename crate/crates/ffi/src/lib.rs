//! C ABI for `tapas-core`.
//!
//! Every fallible call returns a [`TapasStatus`]. On failure the message is
//! kept per thread and can be read with [`tapas_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Strings returned through out-pointers are released with
//! [`tapas_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use tapas_core::config::{self, ConfigMap};
use tapas_core::eval::{map_at_k, precision_at_k};
use tapas_core::tapas::two_pass_sample;
use tapas_core::{Dataset, Error, Mat, Model, Rng, SamplingDistribution, TapasConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Config = 5,
    Io = 6,
    Panic = 7,
}

pub struct TapasDataset(Dataset);
pub struct TapasDistribution(SamplingDistribution);
pub struct TapasModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TapasStatus {
    match err {
        Error::Shape(_) => TapasStatus::Shape,
        Error::EmptyInput(_)
        | Error::InvalidArgument(_)
        | Error::LabelOutOfRange { .. }
        | Error::NegativeOverlapsPositive(_) => TapasStatus::InvalidArgument,
        Error::MalformedHeader(_) | Error::Truncated(_) | Error::VersionMismatch(_) | Error::Json(_) => {
            TapasStatus::Format
        }
        Error::Config(_) | Error::OutputCollision(_) => TapasStatus::Config,
        Error::Io(_) => TapasStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> TapasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TapasStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            TapasStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            TapasStatus::Panic
        }
    }
}

unsafe fn to_ref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn to_str<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn opt_str<'a>(p: *const c_char, what: &'static str) -> FfiResult<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        to_str(p, what).map(Some)
    }
}

unsafe fn to_slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn to_slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn check_out<T>(p: *mut T, what: &'static str) -> FfiResult<()> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::Core(Error::InvalidArgument("string contains NUL".into())))
}

unsafe fn load_config(preset: *const c_char, overrides: *const c_char) -> FfiResult<ConfigMap> {
    let mut cfg = match opt_str(preset, "preset")? {
        Some(name) => ConfigMap::from_preset(config::preset(name)?),
        None => ConfigMap::default(),
    };
    if let Some(text) = opt_str(overrides, "overrides")? {
        cfg.apply_text(text)?;
    }
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tapas_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tapas_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tapas_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Generate the train and test sets described by `preset` (may be null)
/// plus `overrides`, a text of `key = value` lines (may be null).
///
/// # Safety
/// Pointers must be valid; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_generate(
    preset: *const c_char,
    overrides: *const c_char,
    out_train: *mut *mut TapasDataset,
    out_test: *mut *mut TapasDataset,
) -> TapasStatus {
    guard(|| {
        check_out(out_train, "out_train")?;
        check_out(out_test, "out_test")?;
        let exp = load_config(preset, overrides)?.resolve()?;
        let (train, test) = exp.data.materialize()?;
        *out_train = Box::into_raw(Box::new(TapasDataset(train)));
        *out_test = Box::into_raw(Box::new(TapasDataset(test)));
        Ok(())
    })
}

/// Build a dataset from a row-major `rows x cols` feature matrix and
/// `rows` labels in `[0, vocab)`.
///
/// # Safety
/// `features` must hold `rows * cols` values and `labels` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_from_arrays(
    features: *const f64,
    rows: usize,
    cols: usize,
    labels: *const u32,
    vocab: usize,
    out: *mut *mut TapasDataset,
) -> TapasStatus {
    guard(|| {
        check_out(out, "out")?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidArgument("rows * cols overflows".into()))?;
        let x = to_slice(features, len, "features")?;
        let y = to_slice(labels, rows, "labels")?;
        let ds = Dataset::new(Mat::from_vec(rows, cols, x.to_vec())?, y.to_vec(), vocab)?;
        *out = Box::into_raw(Box::new(TapasDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_load(path: *const c_char, out: *mut *mut TapasDataset) -> TapasStatus {
    guard(|| {
        check_out(out, "out")?;
        let ds = Dataset::load(to_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(TapasDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_save(ds: *const TapasDataset, path: *const c_char) -> TapasStatus {
    guard(|| {
        to_ref(ds, "dataset")?.0.save(to_str(path, "path")?)?;
        Ok(())
    })
}

/// Number of examples; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_len(ds: *const TapasDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_dim(ds: *const TapasDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.dim())
}

/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_vocab(ds: *const TapasDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.vocab())
}

/// Copy the empirical label frequencies into `out` (`len` must equal the
/// vocabulary size).
///
/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_label_frequencies(
    ds: *const TapasDataset,
    out: *mut f64,
    len: usize,
) -> TapasStatus {
    guard(|| {
        let f = to_ref(ds, "dataset")?.0.label_frequencies();
        if len != f.len() {
            return Err(Error::Shape(format!("buffer of {len} for {} labels", f.len())).into());
        }
        to_slice_mut(out, len, "out")?.copy_from_slice(f);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tapas_dataset_free(ds: *mut TapasDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// `q ∝ (f + beta)^alpha` over the `len` label frequencies.
///
/// # Safety
/// `freqs` must hold `len` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tapas_distribution_squashed(
    freqs: *const f64,
    len: usize,
    alpha: f64,
    beta: f64,
    out: *mut *mut TapasDistribution,
) -> TapasStatus {
    guard(|| {
        check_out(out, "out")?;
        let d = SamplingDistribution::build_squashed(to_slice(freqs, len, "freqs")?, alpha, beta)?;
        *out = Box::into_raw(Box::new(TapasDistribution(d)));
        Ok(())
    })
}

/// # Safety
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tapas_distribution_uniform(vocab: usize, out: *mut *mut TapasDistribution) -> TapasStatus {
    guard(|| {
        check_out(out, "out")?;
        if vocab == 0 {
            return Err(Error::EmptyInput("uniform distribution").into());
        }
        *out = Box::into_raw(Box::new(TapasDistribution(SamplingDistribution::uniform(vocab))));
        Ok(())
    })
}

/// Copy the normalized probabilities into `out` (`len` must equal the
/// vocabulary size).
///
/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn tapas_distribution_probs(
    dist: *const TapasDistribution,
    out: *mut f64,
    len: usize,
) -> TapasStatus {
    guard(|| {
        let p = to_ref(dist, "distribution")?.0.probs();
        if len != p.len() {
            return Err(Error::Shape(format!("buffer of {len} for {} labels", p.len())).into());
        }
        to_slice_mut(out, len, "out")?.copy_from_slice(p);
        Ok(())
    })
}

/// # Safety
/// `dist` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tapas_distribution_free(dist: *mut TapasDistribution) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_load(path: *const c_char, out: *mut *mut TapasModel) -> TapasStatus {
    guard(|| {
        check_out(out, "out")?;
        let m = Model::load(to_str(path, "path")?)?;
        *out = Box::into_raw(Box::new(TapasModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_save(model: *const TapasModel, path: *const c_char) -> TapasStatus {
    guard(|| {
        to_ref(model, "model")?.0.save(to_str(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_vocab(model: *const TapasModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.vocab())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_input_dim(model: *const TapasModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.encoder.input_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_context_dim(model: *const TapasModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.embeddings.dim())
}

/// Encode one input of `dim` features into `out` (`out_len` must equal
/// the context dimension).
///
/// # Safety
/// `x` must hold `dim` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_encode(
    model: *const TapasModel,
    x: *const f64,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> TapasStatus {
    guard(|| {
        let m = &to_ref(model, "model")?.0;
        let phi = m.encoder.encode(to_slice(x, dim, "x")?)?;
        if out_len != phi.len() {
            return Err(Error::Shape(format!("buffer of {out_len} for context of {}", phi.len())).into());
        }
        to_slice_mut(out, out_len, "out")?.copy_from_slice(&phi);
        Ok(())
    })
}

/// Write the `k` highest-scoring labels for input `x`, best first.
///
/// # Safety
/// `x` must hold `dim` values and `out` `k` values.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_top_k(
    model: *const TapasModel,
    x: *const f64,
    dim: usize,
    k: usize,
    out: *mut u32,
) -> TapasStatus {
    guard(|| {
        let m = &to_ref(model, "model")?.0;
        let top = m.top_k_predict(to_slice(x, dim, "x")?, k)?;
        to_slice_mut(out, k, "out")?.copy_from_slice(&top);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tapas_model_free(model: *mut TapasModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Two-pass sampling: presample `n * r` labels from `dist` without
/// replacement (skipping `exclude`), then keep the `n` with the highest
/// adaptive score under the model's label embeddings at temperature `tau`.
/// `contexts` is a row-major `rows x cols` matrix of encoded contexts.
/// Sorted labels are written to `out` (capacity `out_cap`, at least `n`)
/// and their count to `out_len`.
///
/// # Safety
/// Buffers must hold the stated number of values; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn tapas_two_pass_sample(
    contexts: *const f64,
    rows: usize,
    cols: usize,
    dist: *const TapasDistribution,
    model: *const TapasModel,
    n: usize,
    r: usize,
    tau: f64,
    exclude: *const u32,
    exclude_len: usize,
    seed: u64,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> TapasStatus {
    guard(|| {
        check_out(out_len, "out_len")?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidArgument("rows * cols overflows".into()))?;
        let ctx = Mat::from_vec(rows, cols, to_slice(contexts, len, "contexts")?.to_vec())?;
        let dist = &to_ref(dist, "distribution")?.0;
        let model = &to_ref(model, "model")?.0;
        if cols != model.embeddings.dim() {
            return Err(Error::Shape(format!(
                "contexts have {cols} columns, embeddings {}",
                model.embeddings.dim()
            ))
            .into());
        }
        let mut exclude = to_slice(exclude, exclude_len, "exclude")?.to_vec();
        exclude.sort_unstable();
        exclude.dedup();
        let cfg = TapasConfig {
            n,
            r,
            tau0: tau,
            tau_decay: 1.0,
            tau_min: tau,
        };
        let set = two_pass_sample(&ctx, dist, &model.embeddings, &cfg, 0, &exclude, &mut Rng::new(seed))?;
        let labels = set.labels();
        if out_cap < labels.len() {
            return Err(Error::Shape(format!("buffer of {out_cap} for {} labels", labels.len())).into());
        }
        to_slice_mut(out, labels.len(), "out")?.copy_from_slice(labels);
        *out_len = labels.len();
        Ok(())
    })
}

/// # Safety
/// `ranked` must hold `ranked_len` values and `truth` `truth_len` values.
#[no_mangle]
pub unsafe extern "C" fn tapas_precision_at_k(
    ranked: *const u32,
    ranked_len: usize,
    truth: *const u32,
    truth_len: usize,
    k: usize,
    out: *mut f64,
) -> TapasStatus {
    guard(|| {
        check_out(out, "out")?;
        let ranked = to_slice(ranked, ranked_len, "ranked")?;
        let truth = to_slice(truth, truth_len, "truth")?;
        *out = precision_at_k(ranked, truth, k)?;
        Ok(())
    })
}

/// # Safety
/// `ranked` must hold `ranked_len` values and `truth` `truth_len` values.
#[no_mangle]
pub unsafe extern "C" fn tapas_map_at_k(
    ranked: *const u32,
    ranked_len: usize,
    truth: *const u32,
    truth_len: usize,
    k: usize,
    out: *mut f64,
) -> TapasStatus {
    guard(|| {
        check_out(out, "out")?;
        let ranked = to_slice(ranked, ranked_len, "ranked")?;
        let truth = to_slice(truth, truth_len, "truth")?;
        *out = map_at_k(ranked, truth, k)?;
        Ok(())
    })
}

/// Train on `train`, evaluating on `eval`, with the run configuration given
/// by `preset` (may be null) and `overrides` (may be null). The trained
/// model goes to `out_model` and the metric series, as JSON lines, to
/// `out_metrics` (release with [`tapas_string_free`]).
///
/// # Safety
/// Handles must be live; out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn tapas_train(
    preset: *const c_char,
    overrides: *const c_char,
    train: *const TapasDataset,
    eval: *const TapasDataset,
    out_model: *mut *mut TapasModel,
    out_metrics: *mut *mut c_char,
) -> TapasStatus {
    guard(|| {
        check_out(out_model, "out_model")?;
        check_out(out_metrics, "out_metrics")?;
        let train = &to_ref(train, "train")?.0;
        let eval = &to_ref(eval, "eval")?.0;
        let exp = load_config(preset, overrides)?.resolve()?;
        let outcome = tapas_core::run_training(&exp.run, train, eval)?;
        let metrics = into_c_string(outcome.series.to_jsonl()?)?;
        *out_metrics = metrics;
        *out_model = Box::into_raw(Box::new(TapasModel(outcome.model)));
        Ok(())
    })
}
