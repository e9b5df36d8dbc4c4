//! C ABI for the emsca pipeline.
//!
//! Datasets and models are opaque handles created and destroyed by this
//! library. Every fallible call returns a status code (`EMSCA_OK` on
//! success); on failure, [`emsca_last_error`] returns a message for the
//! calling thread, valid until that thread's next failing call.
//!
//! The generated C header lives at `include/emsca.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use emsca::dataset::{read_emds, split, write_emds, SplitSpec};
use emsca::error::Error;
use emsca::eval::evaluate;
use emsca::mlp::{new_model, MlpModel, TrainConfig};
use emsca::spectral::SpectralDataset;
use emsca::transfer::{transfer_fit, FreezeMode, FreezeSpec};

/// Success.
pub const EMSCA_OK: i32 = 0;
/// Invalid argument (bad value, bad enum, usage error).
pub const EMSCA_ERR_ARGUMENT: i32 = 1;
/// Data, format, schema, or I/O problem.
pub const EMSCA_ERR_DATA: i32 = 2;
/// Training failed (divergence, empty set).
pub const EMSCA_ERR_TRAINING: i32 = 3;
/// A required pointer was null.
pub const EMSCA_ERR_NULL: i32 = 4;

/// Retrain only the output layer (the default transfer mode).
pub const EMSCA_FREEZE_OUTPUT_ONLY: i32 = 0;
/// Retrain only the input layer.
pub const EMSCA_FREEZE_INPUT_ONLY: i32 = 1;
/// Freeze `layers` layers nearest the output; retrain the rest.
pub const EMSCA_FREEZE_TOP: i32 = 2;
/// Freeze `layers` layers nearest the input; retrain the rest.
pub const EMSCA_FREEZE_BOTTOM: i32 = 3;

/// Opaque labeled feature dataset.
pub struct EmscaDataset {
    inner: SpectralDataset,
}

/// Opaque trained classifier.
pub struct EmscaModel {
    inner: MlpModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn code_of(err: &Error) -> i32 {
    match err.exit_code() {
        1 => EMSCA_ERR_ARGUMENT,
        3 => EMSCA_ERR_TRAINING,
        _ => EMSCA_ERR_DATA,
    }
}

fn fail(err: Error) -> i32 {
    set_error(&err.to_string());
    code_of(&err)
}

fn fail_null(what: &str) -> i32 {
    set_error(&format!("null pointer: {what}"));
    EMSCA_ERR_NULL
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, i32> {
    if ptr.is_null() {
        return Err(fail_null(what));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(EMSCA_ERR_ARGUMENT)
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn emsca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the calling thread's most recent failure. Never null; empty
/// when no failure has occurred. Valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn emsca_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads an EMDS dataset file into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsca_dataset_load(
    path: *const c_char,
    out: *mut *mut EmscaDataset,
) -> i32 {
    if out.is_null() {
        return fail_null("out");
    }
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match read_emds(path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(EmscaDataset { inner }));
            EMSCA_OK
        }
        Err(err) => fail(err),
    }
}

/// Writes a dataset handle to an EMDS file.
///
/// # Safety
/// `ds` must be a live handle from this library; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn emsca_dataset_save(ds: *const EmscaDataset, path: *const c_char) -> i32 {
    let Some(ds) = ds.as_ref() else {
        return fail_null("ds");
    };
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match write_emds(&ds.inner, path) {
        Ok(()) => EMSCA_OK,
        Err(err) => fail(err),
    }
}

/// Number of rows, or -1 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emsca_dataset_rows(ds: *const EmscaDataset) -> i64 {
    ds.as_ref().map_or(-1, |d| d.inner.rows() as i64)
}

/// Feature width, or -1 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emsca_dataset_width(ds: *const EmscaDataset) -> i64 {
    ds.as_ref().map_or(-1, |d| d.inner.width() as i64)
}

/// Class count, or -1 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emsca_dataset_classes(ds: *const EmscaDataset) -> i64 {
    ds.as_ref().map_or(-1, |d| d.inner.n_classes() as i64)
}

/// Stratified train/test split; produces two new handles.
///
/// # Safety
/// `ds` must be a live handle; `out_train` and `out_test` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn emsca_dataset_split(
    ds: *const EmscaDataset,
    test_fraction: f64,
    seed: u64,
    out_train: *mut *mut EmscaDataset,
    out_test: *mut *mut EmscaDataset,
) -> i32 {
    let Some(ds) = ds.as_ref() else {
        return fail_null("ds");
    };
    if out_train.is_null() || out_test.is_null() {
        return fail_null("out_train/out_test");
    }
    let spec = SplitSpec {
        test_fraction,
        stratified: true,
        seed,
    };
    match split(&ds.inner, &spec) {
        Ok((train, test)) => {
            *out_train = Box::into_raw(Box::new(EmscaDataset { inner: train }));
            *out_test = Box::into_raw(Box::new(EmscaDataset { inner: test }));
            EMSCA_OK
        }
        Err(err) => fail(err),
    }
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emsca_dataset_free(ds: *mut EmscaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a fresh classifier on `train`, validating on `val`.
///
/// `hidden` points to `hidden_len` hidden-layer widths; pass
/// `hidden_len = 0` for a single softmax layer. The input width and class
/// count come from the training set.
///
/// # Safety
/// Handles must be live; `hidden` must point to `hidden_len` values;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_train(
    train: *const EmscaDataset,
    val: *const EmscaDataset,
    hidden: *const u64,
    hidden_len: usize,
    epochs: u32,
    batch_size: u32,
    seed: u64,
    out: *mut *mut EmscaModel,
) -> i32 {
    let (Some(train), Some(val)) = (train.as_ref(), val.as_ref()) else {
        return fail_null("train/val");
    };
    if out.is_null() {
        return fail_null("out");
    }
    if hidden.is_null() && hidden_len > 0 {
        return fail_null("hidden");
    }
    let mut dims = vec![train.inner.width()];
    dims.extend(
        std::slice::from_raw_parts(hidden, hidden_len)
            .iter()
            .map(|&d| d as usize),
    );
    dims.push(train.inner.n_classes());
    let config = TrainConfig {
        epochs: epochs as usize,
        batch_size: batch_size as usize,
        seed,
        ..TrainConfig::default()
    };
    let mut model = match new_model(&dims, seed) {
        Ok(m) => m,
        Err(err) => return fail(err),
    };
    match model.fit(&train.inner, &val.inner, &config) {
        Ok(_) => {
            *out = Box::into_raw(Box::new(EmscaModel { inner: model }));
            EMSCA_OK
        }
        Err(err) => fail(err),
    }
}

/// Loads an EMNN model file into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_load(path: *const c_char, out: *mut *mut EmscaModel) -> i32 {
    if out.is_null() {
        return fail_null("out");
    }
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match MlpModel::load(path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(EmscaModel { inner }));
            EMSCA_OK
        }
        Err(err) => fail(err),
    }
}

/// Writes a model handle to an EMNN file (bit-exact round trip).
///
/// # Safety
/// `model` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_save(model: *const EmscaModel, path: *const c_char) -> i32 {
    let Some(model) = model.as_ref() else {
        return fail_null("model");
    };
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match model.inner.save(path) {
        Ok(()) => EMSCA_OK,
        Err(err) => fail(err),
    }
}

/// Total parameter count, or -1 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_total_params(model: *const EmscaModel) -> i64 {
    model.as_ref().map_or(-1, |m| m.inner.count_params().1 as i64)
}

/// Trainable parameter count under the model's freeze mask, or -1.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_trainable_params(model: *const EmscaModel) -> i64 {
    model.as_ref().map_or(-1, |m| m.inner.count_params().0 as i64)
}

/// Accuracy of the model on a dataset, written to `out_accuracy`.
///
/// # Safety
/// Handles must be live and `out_accuracy` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_evaluate(
    model: *const EmscaModel,
    ds: *const EmscaDataset,
    out_accuracy: *mut f64,
) -> i32 {
    let (Some(model), Some(ds)) = (model.as_ref(), ds.as_ref()) else {
        return fail_null("model/ds");
    };
    if out_accuracy.is_null() {
        return fail_null("out_accuracy");
    }
    match evaluate(&model.inner, &ds.inner) {
        Ok(report) => {
            *out_accuracy = report.accuracy;
            EMSCA_OK
        }
        Err(err) => fail(err),
    }
}

/// Predicted class index for one raw feature row of `len` values.
///
/// # Safety
/// `model` must be live; `features` must point to `len` values;
/// `out_label` must be valid.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_predict(
    model: *const EmscaModel,
    features: *const f32,
    len: usize,
    out_label: *mut u32,
) -> i32 {
    let Some(model) = model.as_ref() else {
        return fail_null("model");
    };
    if features.is_null() || out_label.is_null() {
        return fail_null("features/out_label");
    }
    let row = std::slice::from_raw_parts(features, len);
    match model.inner.forward(row) {
        Ok(probs) => {
            let mut best = 0usize;
            for (j, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = j;
                }
            }
            *out_label = best as u32;
            EMSCA_OK
        }
        Err(err) => fail(err),
    }
}

/// Adapts a pretrained model to new data by retraining the layers selected
/// by `freeze_mode` (an `EMSCA_FREEZE_*` constant; `layers` applies to the
/// top/bottom modes). Produces a new handle; the input model is untouched.
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn emsca_transfer_fit(
    model: *const EmscaModel,
    train: *const EmscaDataset,
    val: *const EmscaDataset,
    freeze_mode: i32,
    layers: u32,
    reinit_unfrozen: bool,
    epochs: u32,
    batch_size: u32,
    seed: u64,
    out: *mut *mut EmscaModel,
) -> i32 {
    let (Some(model), Some(train), Some(val)) = (model.as_ref(), train.as_ref(), val.as_ref())
    else {
        return fail_null("model/train/val");
    };
    if out.is_null() {
        return fail_null("out");
    }
    let mode = match freeze_mode {
        EMSCA_FREEZE_OUTPUT_ONLY => FreezeMode::OutputOnly,
        EMSCA_FREEZE_INPUT_ONLY => FreezeMode::InputOnly,
        EMSCA_FREEZE_TOP => FreezeMode::FreezeTop(layers as usize),
        EMSCA_FREEZE_BOTTOM => FreezeMode::FreezeBottom(layers as usize),
        other => {
            set_error(&format!("unknown freeze mode {other}"));
            return EMSCA_ERR_ARGUMENT;
        }
    };
    let spec = FreezeSpec {
        mode,
        reinit_unfrozen,
    };
    let config = TrainConfig {
        epochs: epochs as usize,
        batch_size: batch_size as usize,
        seed,
        ..TrainConfig::default()
    };
    match transfer_fit(&model.inner, &train.inner, &val.inner, &spec, &config) {
        Ok((adapted, _report)) => {
            *out = Box::into_raw(Box::new(EmscaModel { inner: adapted }));
            EMSCA_OK
        }
        Err(err) => fail(err),
    }
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emsca_model_free(model: *mut EmscaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
