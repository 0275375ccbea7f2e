//! C ABI over the tagger crate.
//!
//! Handles are opaque pointers created by `*_load`/`*_new`/`*_generate`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`TaggerStatus`]; on failure a message is available from
//! [`tagger_last_error`] until the next failing call on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tagger::autodiff::{NormMode, Tensor};
use tagger::data::{generate_shapes, DatasetBundle};
use tagger::eval::{evaluate, EvalOptions};
use tagger::ladder::LadderConfig;
use tagger::model::{reconstruction, ModelConfig, Tagger};
use tagger::rng;
use tagger::tag::{Corruption, EvalNoise};
use tagger::train::Checkpoint;
use tagger::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaggerStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
}

/// A trained or freshly initialized model.
pub struct TaggerModel {
    inner: Tagger,
}

/// A dataset with inputs, ground-truth groups and labels.
pub struct TaggerDataset {
    inner: DatasetBundle,
}

/// Summary written by [`tagger_evaluate`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TaggerEvalSummary {
    /// Mean per-example AMI, NaN when the data has no segmentation.
    pub ami: f64,
    /// Denoising cost at the final iteration.
    pub final_cost: f64,
    /// Classification error, NaN without a class head or labels.
    pub classification_error: f64,
    pub iterations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TaggerStatus {
    match e {
        Error::Io { .. } => TaggerStatus::Io,
        Error::Format { .. } | Error::UnsupportedVersion(_) => TaggerStatus::Format,
        Error::Shape(_) => TaggerStatus::Shape,
        Error::NonFinite(_) | Error::Diverged { .. } => TaggerStatus::Numeric,
        _ => TaggerStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (TaggerStatus, String)>) -> TaggerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TaggerStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TaggerStatus::Panic
        }
    }
}

fn lib(e: Error) -> (TaggerStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TaggerStatus, String) {
    (TaggerStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (TaggerStatus, String) {
    (TaggerStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, (TaggerStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (TaggerStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (TaggerStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message for the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tagger_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tagger_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tagger_model_load(path: *const c_char, out: *mut *mut TaggerModel) -> TaggerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ckpt = Checkpoint::load(path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(TaggerModel { inner: ckpt.model }));
        Ok(())
    })
}

/// Creates an untrained model. `binary` selects bit-flip corruption with
/// level `noise`, otherwise Gaussian noise with standard deviation `noise`.
/// `layers` lists the Ladder widths, bottom first.
///
/// # Safety
/// `layers` must point to `n_layers` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn tagger_model_new(
    input_size: usize,
    groups: usize,
    iterations: usize,
    layers: *const usize,
    n_layers: usize,
    binary: bool,
    noise: f64,
    data_mean: f64,
    seed: u64,
    out: *mut *mut TaggerModel,
) -> TaggerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if layers.is_null() {
            return Err(null("layers"));
        }
        let layers = std::slice::from_raw_parts(layers, n_layers).to_vec();
        let corruption = if binary {
            Corruption::BitFlip { beta: noise }
        } else {
            Corruption::Gaussian { sigma: noise }
        };
        let config = ModelConfig {
            input_size,
            corruption,
            ladder: LadderConfig {
                layers,
                norm: NormMode::Batch,
                classes: 0,
            },
            data_mean,
            groups,
            iterations,
        };
        let model = Tagger::new(config, &mut rng::seeded(seed)).map_err(lib)?;
        *out = Box::into_raw(Box::new(TaggerModel { inner: model }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tagger_model_save(model: *const TaggerModel, path: *const c_char) -> TaggerStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = path_arg(path)?;
        Checkpoint::from_model(model.inner.clone()).save(path).map_err(lib)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tagger_model_free(model: *mut TaggerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input size `N` of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tagger_model_input_size(model: *const TaggerModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.input_size)
}

/// Groups `K` the model was configured with, 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tagger_model_groups(model: *const TaggerModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.groups)
}

/// Groups a batch of `batch` inputs of the model's input size.
///
/// Writes the final assignment masks as `[batch, groups, N]` into `masks`
/// and the reconstructions `Σ_k m_k z_k` as `[batch, N]` into
/// `reconstructions`. Either output may be null to skip it; non-null
/// outputs must hold exactly that many values.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn tagger_model_run(
    model: *const TaggerModel,
    inputs: *const f64,
    batch: usize,
    groups: usize,
    iterations: usize,
    seed: u64,
    masks: *mut f64,
    masks_len: usize,
    reconstructions: *mut f64,
    reconstructions_len: usize,
) -> TaggerStatus {
    guard(|| {
        let model = &handle(model, "model")?.inner;
        if inputs.is_null() {
            return Err(null("inputs"));
        }
        if batch == 0 || groups == 0 || iterations == 0 {
            return Err(invalid("batch, groups and iterations must be positive"));
        }
        let n = model.config.input_size;
        if !masks.is_null() && masks_len != batch * groups * n {
            return Err(invalid(format!("masks holds {masks_len} values, need {}", batch * groups * n)));
        }
        if !reconstructions.is_null() && reconstructions_len != batch * n {
            return Err(invalid(format!(
                "reconstructions holds {reconstructions_len} values, need {}",
                batch * n
            )));
        }
        let x = Tensor::new(&[batch, n], std::slice::from_raw_parts(inputs, batch * n).to_vec()).map_err(lib)?;
        let opts = model.eval_options(groups, iterations);
        let traj = model.run(&x, &mut rng::seeded(seed), &opts).map_err(lib)?;
        let last = traj.last();
        if !masks.is_null() {
            std::slice::from_raw_parts_mut(masks, masks_len).copy_from_slice(last.m.data());
        }
        if !reconstructions.is_null() {
            std::slice::from_raw_parts_mut(reconstructions, reconstructions_len)
                .copy_from_slice(reconstruction(last).data());
        }
        Ok(())
    })
}

/// Scores the model on a dataset.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tagger_evaluate(
    model: *const TaggerModel,
    dataset: *const TaggerDataset,
    groups: usize,
    iterations: usize,
    seed: u64,
    out: *mut TaggerEvalSummary,
) -> TaggerStatus {
    guard(|| {
        let model = &handle(model, "model")?.inner;
        let data = &handle(dataset, "dataset")?.inner;
        let out = out_arg(out, "out")?;
        if groups == 0 || iterations == 0 {
            return Err(invalid("groups and iterations must be positive"));
        }
        let opts = EvalOptions {
            groups,
            iterations,
            batch: 100,
            seed,
            eval_noise: EvalNoise::Keep,
        };
        let report = evaluate(model, data, &opts).map_err(lib)?;
        *out = TaggerEvalSummary {
            ami: report.ami.unwrap_or(f64::NAN),
            final_cost: *report.denoising_costs.last().unwrap_or(&f64::NAN),
            classification_error: report.classification_error.unwrap_or(f64::NAN),
            iterations,
        };
        Ok(())
    })
}

/// Loads a dataset container.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tagger_dataset_load(path: *const c_char, out: *mut *mut TaggerDataset) -> TaggerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let data = DatasetBundle::load(path_arg(path)?).map_err(lib)?;
        *out = Box::into_raw(Box::new(TaggerDataset { inner: data }));
        Ok(())
    })
}

/// Generates `count` Shapes examples.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tagger_dataset_generate_shapes(
    count: usize,
    seed: u64,
    out: *mut *mut TaggerDataset,
) -> TaggerStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if count == 0 {
            return Err(invalid("count must be positive"));
        }
        let data = generate_shapes(count, seed).map_err(lib)?;
        *out = Box::into_raw(Box::new(TaggerDataset { inner: data }));
        Ok(())
    })
}

/// Writes a dataset container.
///
/// # Safety
/// `dataset` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tagger_dataset_save(dataset: *const TaggerDataset, path: *const c_char) -> TaggerStatus {
    guard(|| {
        let data = handle(dataset, "dataset")?;
        data.inner.save(path_arg(path)?).map_err(lib)
    })
}

/// Number of examples, 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tagger_dataset_len(dataset: *const TaggerDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Values per example, 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tagger_dataset_input_size(dataset: *const TaggerDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.input_size())
}

/// Copies example `index` into `values`, which must hold exactly the
/// dataset's input size.
///
/// # Safety
/// `values` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn tagger_dataset_example(
    dataset: *const TaggerDataset,
    index: usize,
    values: *mut f64,
    len: usize,
) -> TaggerStatus {
    guard(|| {
        let data = &handle(dataset, "dataset")?.inner;
        if values.is_null() {
            return Err(null("values"));
        }
        if index >= data.len() {
            return Err(invalid(format!("index {index} outside 0..{}", data.len())));
        }
        if len != data.input_size() {
            return Err(invalid(format!("buffer holds {len} values, need {}", data.input_size())));
        }
        std::slice::from_raw_parts_mut(values, len).copy_from_slice(data.example(index));
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tagger_dataset_free(dataset: *mut TaggerDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}
