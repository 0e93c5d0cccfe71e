//! C ABI for the koopman-lab pipeline: opaque handles, integer status
//! codes, and a thread-local last-error message. The header is generated
//! into `include/koopman_lab.h` at build time.

use koopman_lab::envs::{generate_dataset, Dataset, EnvSpec};
use koopman_lab::net::{eval_test_eps, train, KoopmanModel, TrainConfig};
use koopman_lab::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Status code of every `kl_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlStatus {
    KlOk = 0,
    /// A required pointer argument was null.
    KlNullPointer = 1,
    /// A string argument was not valid UTF-8.
    KlInvalidUtf8 = 2,
    /// Rejected configuration or argument value.
    KlInvalidArgument = 3,
    /// Numerical failure (non-convergence, divergence, non-finite values).
    KlNumerical = 4,
    /// File I/O or serialization failure.
    KlIo = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> KlStatus {
    match err {
        Error::Io(_) | Error::Json(_) | Error::Format(_) => KlStatus::KlIo,
        Error::Config(_) | Error::ShapeMismatch { .. } => KlStatus::KlInvalidArgument,
        _ => KlStatus::KlNumerical,
    }
}

fn fail(err: Error) -> KlStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Message of the most recent failure on this thread. Valid until the next
/// failing `kl_*` call on the same thread; never null.
#[no_mangle]
pub extern "C" fn kl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, KlStatus> {
    str_arg(ptr).map(Path::new)
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, KlStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(KlStatus::KlNullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        KlStatus::KlInvalidUtf8
    })
}

macro_rules! out_arg {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error("null output pointer");
            return KlStatus::KlNullPointer;
        }
    };
}

macro_rules! try_ffi {
    ($expr:expr) => {
        match $expr {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Opaque trajectory dataset.
pub struct KlDataset(Dataset);
/// Opaque neural Koopman model.
pub struct KlModel(KoopmanModel);

fn env_from_name(name: &str, n_poly: usize) -> Result<EnvSpec, Error> {
    match name {
        "polynomial" => Ok(EnvSpec::polynomial(n_poly)),
        "damped-pendulum" => Ok(EnvSpec::damped_pendulum()),
        "double-pendulum" => Ok(EnvSpec::double_pendulum()),
        other => Err(Error::Config(format!("unknown env `{other}`"))),
    }
}

/// Generate a dataset with `m` training transitions in windows of `t_win`.
/// `env` is one of "polynomial", "damped-pendulum", "double-pendulum";
/// `n_poly` is only read for the polynomial system.
///
/// # Safety
/// `env` must be a valid C string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kl_dataset_generate(
    env: *const c_char,
    n_poly: usize,
    m: usize,
    t_win: usize,
    seed: u64,
    out: *mut *mut KlDataset,
) -> KlStatus {
    out_arg!(out);
    let name = try_ffi!(str_arg(env));
    let spec = match env_from_name(name, n_poly) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    match generate_dataset(&spec, m, t_win, seed) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(KlDataset(ds)));
            KlStatus::KlOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` must be a valid C string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kl_dataset_load(path: *const c_char, out: *mut *mut KlDataset) -> KlStatus {
    out_arg!(out);
    let p = try_ffi!(path_arg(path));
    match Dataset::load(p) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(KlDataset(ds)));
            KlStatus::KlOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `ds` must be a live dataset handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn kl_dataset_save(ds: *const KlDataset, path: *const c_char) -> KlStatus {
    out_arg!(ds);
    let p = try_ffi!(path_arg(path));
    match (*ds).0.save(p) {
        Ok(()) => KlStatus::KlOk,
        Err(e) => fail(e),
    }
}

/// Training transitions in the dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn kl_dataset_transitions(ds: *const KlDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).0.m
}

/// # Safety
/// `ds` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn kl_dataset_free(ds: *mut KlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train a neural Koopman model. `config_json` mirrors the CLI training
/// config one-to-one and may be null for defaults.
///
/// # Safety
/// `ds` must be a live dataset handle; `config_json` null or a valid C
/// string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kl_train(
    ds: *const KlDataset,
    config_json: *const c_char,
    out: *mut *mut KlModel,
) -> KlStatus {
    out_arg!(out);
    out_arg!(ds);
    let cfg: TrainConfig = if config_json.is_null() {
        TrainConfig::default()
    } else {
        let text = try_ffi!(str_arg(config_json));
        match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(Error::Config(format!("bad train config: {e}"))),
        }
    };
    match train(&(*ds).0, &cfg) {
        Ok((model, _)) => {
            *out = Box::into_raw(Box::new(KlModel(model)));
            KlStatus::KlOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` must be a valid C string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kl_model_load(path: *const c_char, out: *mut *mut KlModel) -> KlStatus {
    out_arg!(out);
    let p = try_ffi!(path_arg(path));
    match KoopmanModel::load(p) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(KlModel(m)));
            KlStatus::KlOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be a live model handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn kl_model_save(model: *const KlModel, path: *const c_char) -> KlStatus {
    out_arg!(model);
    let p = try_ffi!(path_arg(path));
    match (*model).0.save(p) {
        Ok(()) => KlStatus::KlOk,
        Err(e) => fail(e),
    }
}

/// State dimension n_x; 0 for a null handle.
///
/// # Safety
/// `model` must be a live model handle or null.
#[no_mangle]
pub unsafe extern "C" fn kl_model_state_dim(model: *const KlModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).0.n_x
}

/// Latent dimension n; 0 for a null handle.
///
/// # Safety
/// `model` must be a live model handle or null.
#[no_mangle]
pub unsafe extern "C" fn kl_model_latent_dim(model: *const KlModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).0.n()
}

/// Encode a state into the latent embedding z = [x; psi(x)]. `x` holds
/// `kl_model_state_dim` values, `z` receives `kl_model_latent_dim` values.
///
/// # Safety
/// `model` must be a live model handle; `x` and `z` must be valid buffers
/// of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn kl_model_encode(
    model: *const KlModel,
    x: *const f64,
    x_len: usize,
    z: *mut f64,
    z_len: usize,
) -> KlStatus {
    out_arg!(model);
    out_arg!(x);
    out_arg!(z);
    let m = &(*model).0;
    if x_len != m.n_x || z_len != m.n() {
        return fail(Error::Config(format!(
            "encode buffers must be {} and {} long, got {} and {}",
            m.n_x,
            m.n(),
            x_len,
            z_len
        )));
    }
    let xs = std::slice::from_raw_parts(x, x_len);
    if xs.iter().any(|v| !v.is_finite()) {
        return fail(Error::NonFinite("encode input".into()));
    }
    let enc = m.encode(xs);
    std::slice::from_raw_parts_mut(z, z_len).copy_from_slice(&enc);
    KlStatus::KlOk
}

/// Undiscounted multi-step test error at the given horizon.
///
/// # Safety
/// `model` and `ds` must be live handles; `out_eps` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kl_eval(
    model: *const KlModel,
    ds: *const KlDataset,
    horizon: usize,
    out_eps: *mut f64,
) -> KlStatus {
    out_arg!(model);
    out_arg!(ds);
    out_arg!(out_eps);
    match eval_test_eps(&(*model).0, &(*ds).0, horizon) {
        Ok(eps) => {
            *out_eps = eps;
            KlStatus::KlOk
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be a handle from this library or null; invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn kl_model_free(model: *mut KlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
