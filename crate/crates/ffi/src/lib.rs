//! C ABI over the adversarial-training laboratory.
//!
//! Objects cross the boundary as opaque handles (`AdvlabModel`,
//! `AdvlabDataset`); every function returns an [`AdvlabStatus`] code and
//! leaves a human-readable message for the last failure in thread-local
//! storage (see [`advlab_last_error`]).
//!
//! The generated header lives at `include/advlab.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use advlab_core::attack::AttackSpec;
use advlab_core::config::parse_config_text;
use advlab_core::data::{load_folder, save_folder, Dataset, SplitTag};
use advlab_core::model::{
    build_model, load_checkpoint, predict_labels, save_checkpoint, ArchSpec, Classifier,
    ModelParams,
};
use advlab_core::rng::Rng;
use advlab_core::tensor::Tensor;
use advlab_core::train::Trainer;
use advlab_core::Error;

/// Status codes returned by every API function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Arguments violated a documented precondition.
    InvalidArgument = 3,
    /// Filesystem failure.
    IoError = 4,
    /// A referenced file, class or architecture does not exist.
    NotFound = 5,
    /// Any other internal failure; see `advlab_last_error`.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn status_of(err: &Error) -> AdvlabStatus {
    match err {
        Error::Io { .. } => AdvlabStatus::IoError,
        Error::MissingFile(_) | Error::UnknownArch(_) | Error::MissingPrerequisite(_) => {
            AdvlabStatus::NotFound
        }
        Error::Contract(_) | Error::Shape(_) | Error::Config { .. } => {
            AdvlabStatus::InvalidArgument
        }
        _ => AdvlabStatus::Internal,
    }
}

fn fail(err: Error) -> AdvlabStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

/// Opaque classifier handle: an architecture plus its parameters.
pub struct AdvlabModel {
    arch: ArchSpec,
    params: ModelParams,
}

/// Opaque labeled image set.
pub struct AdvlabDataset {
    data: Dataset,
}

macro_rules! nonnull {
    ($ptr:expr, $name:literal) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(concat!("null argument: ", $name));
                return AdvlabStatus::NullArgument;
            }
        }
    };
}

macro_rules! nonnull_mut {
    ($ptr:expr, $name:literal) => {
        match unsafe { $ptr.as_mut() } {
            Some(r) => r,
            None => {
                set_error(concat!("null argument: ", $name));
                return AdvlabStatus::NullArgument;
            }
        }
    };
}

fn cstr<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, AdvlabStatus> {
    if ptr.is_null() {
        set_error(&format!("null argument: {name}"));
        return Err(AdvlabStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error(&format!("argument {name} is not valid UTF-8"));
        AdvlabStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next API call from the same thread.
#[no_mangle]
pub extern "C" fn advlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn advlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must have been returned by an advlab function and not freed before.
#[no_mangle]
pub unsafe extern "C" fn advlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Generate the seeded synthetic blob dataset.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_synth(
    classes: u32,
    per_class: u32,
    size: u32,
    seed: u64,
    out: *mut *mut AdvlabDataset,
) -> AdvlabStatus {
    let out = nonnull_mut!(out, "out");
    match advlab_core::data::synth(classes as usize, per_class as usize, size as usize, seed) {
        Ok(data) => {
            *out = Box::into_raw(Box::new(AdvlabDataset { data }));
            AdvlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a folder container (`index.csv` plus PGM/PPM files).
///
/// # Safety
/// `root` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_load_folder(
    root: *const c_char,
    out: *mut *mut AdvlabDataset,
) -> AdvlabStatus {
    let out = nonnull_mut!(out, "out");
    let root = match cstr(root, "root") {
        Ok(s) => Path::new(s).to_path_buf(),
        Err(code) => return code,
    };
    match load_folder(&root, &root.join("index.csv"), None) {
        Ok(data) => {
            *out = Box::into_raw(Box::new(AdvlabDataset { data }));
            AdvlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Export a dataset as a folder container.
///
/// # Safety
/// `ds` must be a live dataset handle; `root` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_save_folder(
    ds: *const AdvlabDataset,
    root: *const c_char,
) -> AdvlabStatus {
    let ds = nonnull!(ds, "ds");
    let root = match cstr(root, "root") {
        Ok(s) => Path::new(s).to_path_buf(),
        Err(code) => return code,
    };
    match save_folder(&ds.data, &root) {
        Ok(()) => AdvlabStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Number of examples.
///
/// # Safety
/// `ds` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_len(
    ds: *const AdvlabDataset,
    out: *mut usize,
) -> AdvlabStatus {
    let ds = nonnull!(ds, "ds");
    let out = nonnull_mut!(out, "out");
    *out = ds.data.len();
    AdvlabStatus::Ok
}

/// Destroy a dataset handle.
///
/// # Safety
/// `ds` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_free(ds: *mut AdvlabDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Build a freshly initialized model from an architecture id such as
/// `smallcnn:1x32x32:3` or `mlp:1x32x32:64:3`.
///
/// # Safety
/// `arch_id` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_model_build(
    arch_id: *const c_char,
    seed: u64,
    out: *mut *mut AdvlabModel,
) -> AdvlabStatus {
    let out = nonnull_mut!(out, "out");
    let id = match cstr(arch_id, "arch_id") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let arch = match ArchSpec::from_arch_id(id) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    match build_model(&arch, seed) {
        Ok(params) => {
            *out = Box::into_raw(Box::new(AdvlabModel { arch, params }));
            AdvlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_model_load(
    path: *const c_char,
    out: *mut *mut AdvlabModel,
) -> AdvlabStatus {
    let out = nonnull_mut!(out, "out");
    let path = match cstr(path, "path") {
        Ok(s) => Path::new(s).to_path_buf(),
        Err(code) => return code,
    };
    let params = match load_checkpoint(&path) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let arch = match ArchSpec::from_arch_id(&params.arch_id) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    *out = Box::into_raw(Box::new(AdvlabModel { arch, params }));
    AdvlabStatus::Ok
}

/// Save a model checkpoint.
///
/// # Safety
/// `model` must be live; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn advlab_model_save(
    model: *const AdvlabModel,
    path: *const c_char,
) -> AdvlabStatus {
    let model = nonnull!(model, "model");
    let path = match cstr(path, "path") {
        Ok(s) => Path::new(s).to_path_buf(),
        Err(code) => return code,
    };
    match save_checkpoint(&model.params, &path) {
        Ok(()) => AdvlabStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Architecture id of a model; free with [`advlab_string_free`].
///
/// # Safety
/// `model` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_model_arch_id(
    model: *const AdvlabModel,
    out: *mut *mut c_char,
) -> AdvlabStatus {
    let model = nonnull!(model, "model");
    let out = nonnull_mut!(out, "out");
    match CString::new(model.params.arch_id.clone()) {
        Ok(s) => {
            *out = s.into_raw();
            AdvlabStatus::Ok
        }
        Err(_) => {
            set_error("arch id contains a NUL byte");
            AdvlabStatus::Internal
        }
    }
}

/// Destroy a model handle.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn advlab_model_free(model: *mut AdvlabModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

// ---------------------------------------------------------------------------
// Inference, attacks, training, evaluation
// ---------------------------------------------------------------------------

/// Classify one image given as row-major channel-plane pixels in [0, 1].
/// `len` must equal channels * height * width of the model input.
///
/// # Safety
/// `pixels` must point to `len` readable doubles; `out_label` writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_predict(
    model: *const AdvlabModel,
    pixels: *const f64,
    len: usize,
    out_label: *mut u32,
) -> AdvlabStatus {
    let model = nonnull!(model, "model");
    let out_label = nonnull_mut!(out_label, "out_label");
    if pixels.is_null() {
        set_error("null argument: pixels");
        return AdvlabStatus::NullArgument;
    }
    let [c, h, w] = model.arch.input_shape;
    if len != c * h * w {
        set_error(&format!(
            "pixel buffer has {len} values, model expects {}",
            c * h * w
        ));
        return AdvlabStatus::InvalidArgument;
    }
    let data = unsafe { std::slice::from_raw_parts(pixels, len) };
    let x = match Tensor::new(
        vec![1, c, h, w],
        data.iter().map(|&v| v as advlab_core::Real).collect(),
    ) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    match predict_labels(&model.arch, &model.params, &x) {
        Ok(pred) => {
            *out_label = pred[0] as u32;
            AdvlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Fraction of dataset examples the model classifies correctly.
///
/// # Safety
/// `model` and `ds` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_accuracy(
    model: *const AdvlabModel,
    ds: *const AdvlabDataset,
    out: *mut f64,
) -> AdvlabStatus {
    let model = nonnull!(model, "model");
    let ds = nonnull!(ds, "ds");
    let out = nonnull_mut!(out, "out");
    match predict_labels(&model.arch, &model.params, &ds.data.images) {
        Ok(pred) => {
            let hit = pred
                .iter()
                .zip(&ds.data.labels)
                .filter(|(a, b)| a == b)
                .count();
            *out = hit as f64 / ds.data.len().max(1) as f64;
            AdvlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Craft an adversarial copy of a dataset with a named attack
/// ("FGSM", "10-IFGSM", "20-PGD", ...), pixels clamped to [0, 1].
/// `out_flip_rate` (optional) receives the fraction of changed predictions.
///
/// # Safety
/// `model` and `ds` must be live; `attack_name` a valid C string; `out`
/// writable; `out_flip_rate` writable or null.
#[no_mangle]
pub unsafe extern "C" fn advlab_attack_dataset(
    model: *const AdvlabModel,
    ds: *const AdvlabDataset,
    attack_name: *const c_char,
    epsilon: f64,
    step: f64,
    seed: u64,
    out: *mut *mut AdvlabDataset,
    out_flip_rate: *mut f64,
) -> AdvlabStatus {
    let model = nonnull!(model, "model");
    let ds = nonnull!(ds, "ds");
    let out = nonnull_mut!(out, "out");
    let name = match cstr(attack_name, "attack_name") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let spec = match AttackSpec::from_name(
        name,
        epsilon as advlab_core::Real,
        step as advlab_core::Real,
    ) {
        Ok(s) => s.with_clamp(0.0, 1.0),
        Err(e) => return fail(e),
    };
    let target = Classifier {
        arch: &model.arch,
        params: &model.params,
    };
    let stride = ds.data.images.example_stride();
    let mut x_adv = Vec::with_capacity(ds.data.images.len());
    let mut flips = 0usize;
    let root = Rng::new(seed);
    let chunk = 32usize;
    let mut start = 0;
    let mut chunk_idx = 0u64;
    while start < ds.data.len() {
        let m = chunk.min(ds.data.len() - start);
        let idx: Vec<usize> = (start..start + m).collect();
        let batch = ds.data.select(&idx, ds.data.split_tag);
        let stream = root.fork(&[chunk_idx]);
        match advlab_core::attack::iterative_attack(
            &target,
            &batch.images,
            &batch.labels,
            &spec,
            &stream,
        ) {
            Ok(adv) => {
                x_adv.extend_from_slice(adv.x_adv.data());
                flips += adv.success.iter().filter(|&&s| s).count();
            }
            Err(e) => return fail(e),
        }
        start += m;
        chunk_idx += 1;
    }
    let mut shape = ds.data.images.shape().to_vec();
    shape[0] = ds.data.len();
    debug_assert_eq!(x_adv.len(), ds.data.len() * stride);
    let adv_ds = Dataset {
        images: match Tensor::new(shape, x_adv) {
            Ok(t) => t,
            Err(e) => return fail(e),
        },
        labels: ds.data.labels.clone(),
        class_names: ds.data.class_names.clone(),
        split_tag: SplitTag::Test,
    };
    if let Some(rate) = unsafe { out_flip_rate.as_mut() } {
        *rate = flips as f64 / ds.data.len().max(1) as f64;
    }
    *out = Box::into_raw(Box::new(AdvlabDataset { data: adv_ds }));
    AdvlabStatus::Ok
}

/// Train the model in place. `config_text` uses the same `section.key =
/// value` format as the CLI config files (only the `train.*` keys matter
/// here); pass an empty string for the protocol defaults. Validation data
/// is optional (may be null) and drives early stopping.
///
/// # Safety
/// `model` must be a live mutable handle, `train` a live dataset handle,
/// `val` live or null, `config_text` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn advlab_train(
    model: *mut AdvlabModel,
    train: *const AdvlabDataset,
    val: *const AdvlabDataset,
    config_text: *const c_char,
) -> AdvlabStatus {
    let model = nonnull_mut!(model, "model");
    let train_ds = nonnull!(train, "train");
    let val_ds = unsafe { val.as_ref() };
    let text = match cstr(config_text, "config_text") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let cfg = match parse_config_text(text) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let mut trainer = match Trainer::new(model.arch.clone(), cfg.train) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    match trainer.fit(
        model.params.clone(),
        &train_ds.data,
        val_ds.map(|v| &v.data),
    ) {
        Ok(fit) => {
            model.params = fit.params;
            AdvlabStatus::Ok
        }
        Err(e) => fail(e),
    }
}
