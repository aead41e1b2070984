//! C ABI for the `cqkd` simulator.
//!
//! Every fallible function returns a [`CqkdStatus`]. On failure the message is
//! available from [`cqkd_last_error_message`] on the same thread until the
//! next failing call. Handles are opaque and must be released with their
//! matching `_free` function; strings returned through out-parameters are
//! released with [`cqkd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cqkd::analysis::{error_budget, expected_d1_rate, RunReport};
use cqkd::config::ScenarioConfig;
use cqkd::devices::DetectorChannel;
use cqkd::feedback::run_lock;
use cqkd::protocol::run_experiment;
use cqkd::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Missing config, schema violation or malformed override.
    ConfigError = 3,
    /// A value out of its allowed range.
    ParameterError = 4,
    RuntimeError = 5,
    Panic = 6,
}

/// Scenario configuration handle.
pub struct CqkdConfig {
    inner: ScenarioConfig,
}

/// Run report handle.
pub struct CqkdReport {
    inner: RunReport,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CqkdSummary {
    pub n_slots: u64,
    pub sifted_bits: u64,
    pub sifted_errors: u64,
    /// False when nothing was sifted; `qber` is then 0.
    pub has_qber: bool,
    pub qber: f64,
    pub key_rate: f64,
    pub d1_rate: f64,
    pub session_seconds: f64,
    pub total_counts: u64,
    pub d2_same: u64,
    pub d2_diff: u64,
    pub d3_same: u64,
    pub d3_diff: u64,
    pub multiple: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CqkdErrorBudget {
    pub e_dark: f64,
    pub e_afterpulse: f64,
    pub e_extinction: f64,
    pub e_visibility: f64,
    pub e_total: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CqkdLockSummary {
    pub duration_s: f64,
    pub samples: u64,
    pub effective_visibility: f64,
    pub fraction_in_lock: f64,
    pub rms_delta_rad: f64,
    pub max_abs_volts: f64,
    pub saturated_samples: u64,
}

/// Number of detector channels, in the order D1H, D1V, D2, D3H, D3V.
pub const CQKD_CHANNELS: usize = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<Vec<u8>>) {
    let mut bytes = msg.into();
    bytes.retain(|b| *b != 0);
    let c = CString::new(bytes).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CqkdStatus {
    match e {
        Error::Parameter { .. } | Error::Unsupported(_) => CqkdStatus::ParameterError,
        e if e.is_config_error() => CqkdStatus::ConfigError,
        _ => CqkdStatus::RuntimeError,
    }
}

struct Fail(CqkdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CqkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CqkdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CqkdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(CqkdStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CqkdStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(CqkdStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(CqkdStatus::NullPointer, format!("{what} is null")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s)
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cqkd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty if none. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cqkd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a config by path or bundled name (`fiber1km_mu05`, ...).
///
/// # Safety
/// `name` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_config_load(
    name: *const c_char,
    out: *mut *mut CqkdConfig,
) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ScenarioConfig::load(str_arg(name, "name")?, &[])?;
        *out = Box::into_raw(Box::new(CqkdConfig { inner: cfg }));
        Ok(())
    })
}

/// Parses a config from TOML text.
///
/// # Safety
/// `toml` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_config_from_toml(
    toml: *const c_char,
    out: *mut *mut CqkdConfig,
) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ScenarioConfig::from_toml_str(str_arg(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(CqkdConfig { inner: cfg }));
        Ok(())
    })
}

/// Applies one `key=value` override. The config is unchanged on failure.
///
/// # Safety
/// `cfg` must come from this library; `spec` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn cqkd_config_set(cfg: *mut CqkdConfig, spec: *const c_char) -> CqkdStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        let spec = str_arg(spec, "spec")?.to_string();
        cfg.inner = cfg.inner.with_overrides(&[spec])?;
        Ok(())
    })
}

/// Serializes the config back to TOML. Free the result with `cqkd_string_free`.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_config_to_toml(
    cfg: *const CqkdConfig,
    out: *mut *mut c_char,
) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = into_c_string(ref_arg(cfg, "cfg")?.inner.to_toml_string()?);
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cqkd_config_free(cfg: *mut CqkdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the session described by `cfg`.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_run(cfg: *const CqkdConfig, out: *mut *mut CqkdReport) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = &ref_arg(cfg, "cfg")?.inner;
        let report = run_experiment(
            &c.system_params(),
            &c.adversary,
            &c.run_settings(),
            &c.live_lock(),
        )?;
        *out = Box::into_raw(Box::new(CqkdReport { inner: report }));
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_report_summary(
    report: *const CqkdReport,
    out: *mut CqkdSummary,
) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = &ref_arg(report, "report")?.inner;
        *out = CqkdSummary {
            n_slots: r.n_slots,
            sifted_bits: r.counts.sifted_bits,
            sifted_errors: r.counts.sifted_errors,
            has_qber: r.qber.is_some(),
            qber: r.qber.unwrap_or(0.0),
            key_rate: r.key_rate,
            d1_rate: r.d1_rate,
            session_seconds: r.session_seconds,
            total_counts: r.counts.total_counts,
            d2_same: r.counts.d2_same,
            d2_diff: r.counts.d2_diff,
            d3_same: r.counts.d3_same,
            d3_diff: r.counts.d3_diff,
            multiple: r.counts.multiple,
        };
        Ok(())
    })
}

/// Writes per-channel click counts, D1H, D1V, D2, D3H, D3V, into `out`,
/// which must hold `len >= CQKD_CHANNELS` values.
///
/// # Safety
/// `report` must come from this library; `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn cqkd_report_channel_counts(
    report: *const CqkdReport,
    out: *mut u64,
    len: usize,
) -> CqkdStatus {
    guard(|| {
        let r = &ref_arg(report, "report")?.inner;
        if out.is_null() {
            return Err(Fail(CqkdStatus::NullPointer, "out is null".into()));
        }
        if len < CQKD_CHANNELS {
            return Err(Fail(
                CqkdStatus::ParameterError,
                format!("len {len} < {CQKD_CHANNELS}"),
            ));
        }
        let out = std::slice::from_raw_parts_mut(out, CQKD_CHANNELS);
        for (slot, c) in out.iter_mut().zip(DetectorChannel::ALL) {
            *slot = r.counts.per_channel.get(c.name()).copied().unwrap_or(0);
        }
        Ok(())
    })
}

/// Full report as JSON. Free the result with `cqkd_string_free`.
///
/// # Safety
/// `report` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_report_to_json(
    report: *const CqkdReport,
    out: *mut *mut c_char,
) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = into_c_string(ref_arg(report, "report")?.inner.to_json()?);
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cqkd_report_free(report: *mut CqkdReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Analytic error budget. A `d1_rate` of zero or less uses the analytic
/// D1 rate estimate for the config.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_error_budget(
    cfg: *const CqkdConfig,
    d1_rate: f64,
    out: *mut CqkdErrorBudget,
) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let params = ref_arg(cfg, "cfg")?.inner.system_params();
        let rate = if d1_rate > 0.0 {
            d1_rate
        } else {
            expected_d1_rate(&params)
        };
        let b = error_budget(&params, rate)?;
        *out = CqkdErrorBudget {
            e_dark: b.e_dark,
            e_afterpulse: b.e_afterpulse,
            e_extinction: b.e_extinction,
            e_visibility: b.e_visibility,
            e_total: b.e_total,
        };
        Ok(())
    })
}

/// Simulates the phase lock for `duration_s` seconds. `feedback` is 1 for
/// on, 0 for off, negative to keep the config's setting.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cqkd_lock(
    cfg: *const CqkdConfig,
    duration_s: f64,
    feedback: i32,
    seed: u64,
    out: *mut CqkdLockSummary,
) -> CqkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = &ref_arg(cfg, "cfg")?.inner;
        let mut settings = c.lock;
        if feedback >= 0 {
            settings.feedback = feedback != 0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = run_lock(&c.controller, &settings, duration_s, &mut rng)?.summary;
        *out = CqkdLockSummary {
            duration_s: s.duration_s,
            samples: s.samples,
            effective_visibility: s.effective_visibility,
            fraction_in_lock: s.fraction_in_lock,
            rms_delta_rad: s.rms_delta_rad,
            max_abs_volts: s.max_abs_volts,
            saturated_samples: s.saturated_samples,
        };
        Ok(())
    })
}

/// # Safety
/// `s` must be a string returned by this library or null.
#[no_mangle]
pub unsafe extern "C" fn cqkd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
