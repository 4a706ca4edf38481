//! C ABI over `softhjb`.
//!
//! Objects cross the boundary as opaque handles, released with the matching
//! `*_free`. Every fallible call
//! returns a `SofthjbStatus`; on failure a message is available from
//! `softhjb_last_error_message` until the next call on the same thread.
//! Strings returned by the library are released with `softhjb_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use softhjb::config::{parse_config, ResolvedConfig};
use softhjb::policy::posterior_policy;
use softhjb::simulator::simulate_dataset;
use softhjb::trainer::train;
use softhjb::{Dataset, Error, ExtendedState, ValueNetwork};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SofthjbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    DimensionMismatch = 4,
    CurvatureCollapse = 5,
    NonFinite = 6,
    Io = 7,
    Format = 8,
    Panic = 9,
}

/// A parsed run configuration: model, behavioral policy and run settings.
pub struct SofthjbConfig {
    inner: ResolvedConfig,
}

/// A value network.
pub struct SofthjbNetwork {
    inner: ValueNetwork,
}

/// A set of logged trajectories.
pub struct SofthjbDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SofthjbStatus {
    match err.root() {
        Error::DimensionMismatch { .. } => SofthjbStatus::DimensionMismatch,
        Error::Invalid { .. } | Error::DegenerateCost(_) => SofthjbStatus::InvalidArgument,
        Error::CurvatureCollapse { .. } => SofthjbStatus::CurvatureCollapse,
        Error::NonFiniteLoss { .. } | Error::QuadratureNonConvergent(_) => SofthjbStatus::NonFinite,
        Error::Io(_) => SofthjbStatus::Io,
        _ => SofthjbStatus::Format,
    }
}

struct Failure(SofthjbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SofthjbStatus::NullPointer, format!("{what} is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SofthjbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SofthjbStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SofthjbStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SofthjbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(SofthjbStatus::Format, "string contains NUL".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn softhjb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next library call on the same thread.
#[no_mangle]
pub extern "C" fn softhjb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn softhjb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a JSON run configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_config` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_config_from_json(json: *const c_char, out_config: *mut *mut SofthjbConfig) -> SofthjbStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        *slot = ptr::null_mut();
        let cfg = parse_config(text(json, "json")?).map_err(|e| Failure(SofthjbStatus::Config, e.to_string()))?;
        *slot = Box::into_raw(Box::new(SofthjbConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or a handle from `softhjb_config_from_json`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn softhjb_config_free(config: *mut SofthjbConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Writes the state dimension, action dimension and number of mixture components.
///
/// # Safety
/// `config` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_config_dims(
    config: *const SofthjbConfig,
    out_state_dim: *mut usize,
    out_action_dim: *mut usize,
    out_components: *mut usize,
) -> SofthjbStatus {
    guard(|| {
        let c = &handle(config, "config")?.inner;
        *out(out_state_dim, "out_state_dim")? = c.spec().state_dim;
        *out(out_action_dim, "out_action_dim")? = c.spec().action_dim;
        *out(out_components, "out_components")? = c.policy.n_components();
        Ok(())
    })
}

/// Loads a network or training checkpoint from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_network` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_network_from_json(json: *const c_char, out_network: *mut *mut SofthjbNetwork) -> SofthjbStatus {
    guard(|| {
        let slot = out(out_network, "out_network")?;
        *slot = ptr::null_mut();
        let net = ValueNetwork::from_json(text(json, "json")?)?;
        *slot = Box::into_raw(Box::new(SofthjbNetwork { inner: net }));
        Ok(())
    })
}

/// Serializes a network to JSON; release the result with `softhjb_string_free`.
///
/// # Safety
/// `network` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_network_to_json(network: *const SofthjbNetwork, out_json: *mut *mut c_char) -> SofthjbStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        *slot = ptr::null_mut();
        *slot = into_c_string(handle(network, "network")?.inner.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `network` must be NULL or a live handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn softhjb_network_free(network: *mut SofthjbNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Evaluates `J(x, cost, t)`.
///
/// # Safety
/// `network` must be a live handle, `x` must point to `x_len` doubles, and
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_network_eval(
    network: *const SofthjbNetwork,
    x: *const f64,
    x_len: usize,
    cost: f64,
    t: f64,
    out_value: *mut f64,
) -> SofthjbStatus {
    guard(|| {
        let net = &handle(network, "network")?.inner;
        *out(out_value, "out_value")? = net.eval(slice(x, x_len, "x")?, cost, t)?;
        Ok(())
    })
}

/// Extracted mixture at `(x, cost, t)`. Writes `K` weights, `K * M` means
/// (component-major) and `K` isotropic variances.
///
/// # Safety
/// Handles must be live; `x` must hold `x_len` doubles; `out_weights` and
/// `out_variances` must hold `K` doubles and `out_means` `K * M`.
#[no_mangle]
pub unsafe extern "C" fn softhjb_posterior_policy(
    config: *const SofthjbConfig,
    network: *const SofthjbNetwork,
    x: *const f64,
    x_len: usize,
    cost: f64,
    t: f64,
    out_weights: *mut f64,
    out_means: *mut f64,
    out_variances: *mut f64,
) -> SofthjbStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.inner;
        let net = &handle(network, "network")?.inner;
        let at = ExtendedState::new(slice(x, x_len, "x")?.to_vec(), cost, t);
        let vg = net.input_gradients(cfg.spec(), &at)?;
        let post = posterior_policy(&cfg.policy, &vg, &at, cfg.spec())?;
        let (k, m) = (cfg.policy.n_components(), cfg.spec().action_dim);
        for p in [out_weights, out_means, out_variances] {
            if p.is_null() {
                return Err(null("output buffer"));
            }
        }
        let weights = std::slice::from_raw_parts_mut(out_weights, k);
        let means = std::slice::from_raw_parts_mut(out_means, k * m);
        let variances = std::slice::from_raw_parts_mut(out_variances, k);
        weights.copy_from_slice(post.weights());
        variances.copy_from_slice(post.covariances());
        for (dst, src) in means.chunks_mut(m.max(1)).zip(post.means()) {
            dst.copy_from_slice(src);
        }
        Ok(())
    })
}

/// Simulates a behavioral dataset with the configured initial-state sampler.
///
/// # Safety
/// `config` must be a live handle; `out_dataset` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_simulate(
    config: *const SofthjbConfig,
    n_trajectories: usize,
    seed: u64,
    out_dataset: *mut *mut SofthjbDataset,
) -> SofthjbStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        *slot = ptr::null_mut();
        let cfg = &handle(config, "config")?.inner;
        let ds = simulate_dataset(
            cfg.spec(),
            &cfg.policy,
            n_trajectories,
            seed,
            &cfg.raw.simulate.initial_states,
        )?;
        *slot = Box::into_raw(Box::new(SofthjbDataset { inner: ds }));
        Ok(())
    })
}

/// Loads a JSON Lines dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_dataset` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_dataset_load(path: *const c_char, out_dataset: *mut *mut SofthjbDataset) -> SofthjbStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        *slot = ptr::null_mut();
        let ds = Dataset::load(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(SofthjbDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn softhjb_dataset_save(dataset: *const SofthjbDataset, path: *const c_char) -> SofthjbStatus {
    guard(|| {
        handle(dataset, "dataset")?.inner.save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_dataset_len(dataset: *const SofthjbDataset, out_len: *mut usize) -> SofthjbStatus {
    guard(|| {
        *out(out_len, "out_len")? = handle(dataset, "dataset")?.inner.trajectories.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be NULL or a live handle, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn softhjb_dataset_free(dataset: *mut SofthjbDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a freshly initialized network with the configuration's `train` section.
///
/// # Safety
/// Handles must be live; `out_network` must be writable.
#[no_mangle]
pub unsafe extern "C" fn softhjb_train(
    config: *const SofthjbConfig,
    dataset: *const SofthjbDataset,
    out_network: *mut *mut SofthjbNetwork,
) -> SofthjbStatus {
    guard(|| {
        let slot = out(out_network, "out_network")?;
        *slot = ptr::null_mut();
        let cfg = &handle(config, "config")?.inner;
        let ds = &handle(dataset, "dataset")?.inner;
        let net = cfg.raw.train.initial_network(ds)?;
        let (trained, _) = train(net, ds, cfg.spec(), &cfg.policy, &cfg.raw.train)?;
        *slot = Box::into_raw(Box::new(SofthjbNetwork { inner: trained }));
        Ok(())
    })
}
