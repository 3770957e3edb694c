//! C ABI for the venteval pipeline. The surface is deliberately small:
//! load fitted artifacts (policy, propensity model, transition model) from
//! their JSON files, query them pointwise, and release them. Handles are
//! opaque; every fallible call returns an error code and stores a
//! human-readable message retrievable with [`venteval_last_error`].
//!
//! The matching C declarations live in `include/venteval.h`, which is
//! maintained by hand and pinned to this file by a test.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use venteval::mdp::{discretize_action, representative_action, reward, ActionTriple, RewardParams, StateVector};
use venteval::nwe::NweModel;
use venteval::policies::PolicyModel;
use venteval::propensity::LogisticModel;
use venteval::schema::{N_TYPE_FEATURES, STATE_DIM, TARGET_DIM};
use venteval::VentError;

pub const VENTEVAL_OK: c_int = 0;
pub const VENTEVAL_ERR_INVALID_ARGUMENT: c_int = 1;
pub const VENTEVAL_ERR_DATA: c_int = 2;
pub const VENTEVAL_ERR_NUMERIC: c_int = 3;
pub const VENTEVAL_ERR_IO: c_int = 4;
pub const VENTEVAL_ERR_SERDE: c_int = 5;
pub const VENTEVAL_ERR_NULL_POINTER: c_int = 6;
pub const VENTEVAL_ERR_UTF8: c_int = 7;
pub const VENTEVAL_ERR_BUFFER_TOO_SMALL: c_int = 8;
pub const VENTEVAL_ERR_PANIC: c_int = 9;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn record_error(code: c_int, message: &str) -> c_int {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NUL bytes removed");
    });
    code
}

fn record_vent_error(e: &VentError) -> c_int {
    let code = match e {
        VentError::InvalidArgument(_) => VENTEVAL_ERR_INVALID_ARGUMENT,
        VentError::Data(_) | VentError::FeatureAllMissing { .. } | VentError::Csv { .. } => {
            VENTEVAL_ERR_DATA
        }
        VentError::Numeric(_) | VentError::Diverged { .. } => VENTEVAL_ERR_NUMERIC,
        VentError::Io { .. } => VENTEVAL_ERR_IO,
        VentError::Serde(_) => VENTEVAL_ERR_SERDE,
    };
    record_error(code, &e.to_string())
}

/// Run `f` with panics converted to an error code, never unwinding into C.
fn guarded(f: impl FnOnce() -> c_int) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => record_error(VENTEVAL_ERR_PANIC, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be NULL or a valid NUL-terminated C string.
unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, c_int> {
    if ptr.is_null() {
        return Err(record_error(
            VENTEVAL_ERR_NULL_POINTER,
            &format!("{what}: path is NULL"),
        ));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(record_error(
            VENTEVAL_ERR_UTF8,
            &format!("{what}: path is not valid UTF-8"),
        )),
    }
}

fn require_out<T>(ptr: *mut T, what: &str) -> Result<(), c_int> {
    if ptr.is_null() {
        Err(record_error(
            VENTEVAL_ERR_NULL_POINTER,
            &format!("{what}: output pointer is NULL"),
        ))
    } else {
        Ok(())
    }
}

/// Copy `s` into `buf` (truncating, always NUL-terminated when `len > 0`)
/// and return the untruncated length.
unsafe fn copy_str(s: &str, buf: *mut c_char, len: usize) -> usize {
    if !buf.is_null() && len > 0 {
        let n = s.len().min(len - 1);
        std::ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), n);
        *buf.add(n) = 0;
    }
    s.len()
}

/// Opaque trained-policy handle.
pub struct VentevalPolicy(PolicyModel);
/// Opaque propensity-model handle.
pub struct VentevalPropensity(LogisticModel);
/// Opaque transition-model handle.
pub struct VentevalNwe(NweModel);

/// Crate version string; returns the full length, truncating the copy to
/// `len - 1` bytes plus a NUL.
///
/// # Safety
/// `buf` must be NULL or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn venteval_version(buf: *mut c_char, len: usize) -> usize {
    copy_str(env!("CARGO_PKG_VERSION"), buf, len)
}

/// Message of the most recent error on this thread (empty if none), same
/// copy semantics as [`venteval_version`].
///
/// # Safety
/// `buf` must be NULL or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn venteval_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| copy_str(&slot.borrow().to_string_lossy(), buf, len))
}

/// Map raw ventilator settings to their 1-based bins.
///
/// # Safety
/// The out pointers must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn venteval_discretize_action(
    vt_raw: f64,
    peep_raw: f64,
    fio2_raw: f64,
    vt_bin: *mut u8,
    peep_bin: *mut u8,
    fio2_bin: *mut u8,
) -> c_int {
    guarded(|| {
        for (ptr, what) in [(vt_bin, "vt_bin"), (peep_bin, "peep_bin"), (fio2_bin, "fio2_bin")] {
            if let Err(code) = require_out(ptr, what) {
                return code;
            }
        }
        match discretize_action(vt_raw, peep_raw, fio2_raw) {
            Ok(a) => {
                *vt_bin = a.vt_bin;
                *peep_bin = a.peep_bin;
                *fio2_bin = a.fio2_bin;
                VENTEVAL_OK
            }
            Err(e) => record_vent_error(&e),
        }
    })
}

/// Canonical continuous settings for a binned action (bin midpoints; the
/// unbounded top bins use a nominal interior point).
///
/// # Safety
/// The out pointers must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn venteval_representative_action(
    vt_bin: u8,
    peep_bin: u8,
    fio2_bin: u8,
    vt_raw: *mut f64,
    peep_raw: *mut f64,
    fio2_raw: *mut f64,
) -> c_int {
    guarded(|| {
        for (ptr, what) in [(vt_raw, "vt_raw"), (peep_raw, "peep_raw"), (fio2_raw, "fio2_raw")] {
            if let Err(code) = require_out(ptr, what) {
                return code;
            }
        }
        match ActionTriple::new(vt_bin, peep_bin, fio2_bin) {
            Ok(a) => {
                let (vt, peep, fio2) = representative_action(a);
                *vt_raw = vt;
                *peep_raw = peep;
                *fio2_raw = fio2;
                VENTEVAL_OK
            }
            Err(e) => record_vent_error(&e),
        }
    })
}

/// One-step reward for a transition under penalty weights (alpha, beta).
///
/// # Safety
/// `state` and `next_state` must be NULL or point to `VENTEVAL_STATE_DIM`
/// doubles; `out` must be NULL or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn venteval_reward(
    state: *const f64,
    next_state: *const f64,
    vt_bin: u8,
    peep_bin: u8,
    fio2_bin: u8,
    alpha: f64,
    beta: f64,
    out: *mut f64,
) -> c_int {
    guarded(|| {
        if state.is_null() || next_state.is_null() {
            return record_error(VENTEVAL_ERR_NULL_POINTER, "venteval_reward: state is NULL");
        }
        if let Err(code) = require_out(out, "venteval_reward") {
            return code;
        }
        let a = match ActionTriple::new(vt_bin, peep_bin, fio2_bin) {
            Ok(a) => a,
            Err(e) => return record_vent_error(&e),
        };
        let params = RewardParams::new(alpha, beta);
        if let Err(e) = params.validate() {
            return record_vent_error(&e);
        }
        let mut s = StateVector([0.0; STATE_DIM]);
        let mut s_next = StateVector([0.0; STATE_DIM]);
        s.0.copy_from_slice(std::slice::from_raw_parts(state, STATE_DIM));
        s_next.0.copy_from_slice(std::slice::from_raw_parts(next_state, STATE_DIM));
        *out = reward(&s, &s_next, a, &params);
        VENTEVAL_OK
    })
}

unsafe fn load_handle<T, M>(
    path: *const c_char,
    out: *mut *mut T,
    what: &str,
    read: impl FnOnce(&Path) -> Result<M, VentError>,
    wrap: impl FnOnce(M) -> T,
) -> c_int {
    let path = match path_arg(path, what) {
        Ok(p) => p,
        Err(code) => return code,
    };
    if let Err(code) = require_out(out, what) {
        return code;
    }
    match read(path) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(wrap(model)));
            VENTEVAL_OK
        }
        Err(e) => record_vent_error(&e),
    }
}

/// Load a policy saved by the pipeline (`bc.json`, `cqi.json`, `cq.json`).
///
/// # Safety
/// `path` must be NULL or a valid C string; `out` must be NULL or valid
/// for a write. On success `*out` owns the handle until
/// [`venteval_policy_free`].
#[no_mangle]
pub unsafe extern "C" fn venteval_policy_load(
    path: *const c_char,
    out: *mut *mut VentevalPolicy,
) -> c_int {
    guarded(|| {
        load_handle(path, out, "venteval_policy_load", PolicyModel::load, VentevalPolicy)
    })
}

/// # Safety
/// `policy` must be NULL or a handle from [`venteval_policy_load`]; it
/// must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn venteval_policy_free(policy: *mut VentevalPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Short policy-family name ("bc", "cqi", "cq"), NUL-terminated.
///
/// # Safety
/// `policy` must be NULL or a live handle; `buf` must be NULL or valid
/// for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn venteval_policy_kind(
    policy: *const VentevalPolicy,
    buf: *mut c_char,
    len: usize,
) -> c_int {
    guarded(|| {
        if policy.is_null() {
            return record_error(VENTEVAL_ERR_NULL_POINTER, "venteval_policy_kind: NULL handle");
        }
        let kind = (*policy).0.kind();
        if buf.is_null() || len <= kind.len() {
            return record_error(
                VENTEVAL_ERR_BUFFER_TOO_SMALL,
                &format!("venteval_policy_kind: need {} bytes", kind.len() + 1),
            );
        }
        copy_str(kind, buf, len);
        VENTEVAL_OK
    })
}

/// Greedy action of the policy at a 16-dimensional state.
///
/// # Safety
/// `policy` must be NULL or a live handle; `state` must be NULL or point
/// to `VENTEVAL_STATE_DIM` doubles; the out pointers must be NULL or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn venteval_policy_decide(
    policy: *const VentevalPolicy,
    state: *const f64,
    vt_bin: *mut u8,
    peep_bin: *mut u8,
    fio2_bin: *mut u8,
) -> c_int {
    guarded(|| {
        if policy.is_null() || state.is_null() {
            return record_error(
                VENTEVAL_ERR_NULL_POINTER,
                "venteval_policy_decide: NULL argument",
            );
        }
        for (ptr, what) in [(vt_bin, "vt_bin"), (peep_bin, "peep_bin"), (fio2_bin, "fio2_bin")] {
            if let Err(code) = require_out(ptr, what) {
                return code;
            }
        }
        let mut s = StateVector([0.0; STATE_DIM]);
        s.0.copy_from_slice(std::slice::from_raw_parts(state, STATE_DIM));
        if s.0.iter().any(|v| !v.is_finite()) {
            return record_error(VENTEVAL_ERR_NUMERIC, "venteval_policy_decide: non-finite state");
        }
        let a = (*policy).0.as_policy().decide(&s).greedy();
        *vt_bin = a.vt_bin;
        *peep_bin = a.peep_bin;
        *fio2_bin = a.fio2_bin;
        VENTEVAL_OK
    })
}

/// Load a fitted propensity model (`propensity.json`).
///
/// # Safety
/// Same contract as [`venteval_policy_load`].
#[no_mangle]
pub unsafe extern "C" fn venteval_propensity_load(
    path: *const c_char,
    out: *mut *mut VentevalPropensity,
) -> c_int {
    guarded(|| {
        load_handle(
            path,
            out,
            "venteval_propensity_load",
            |p| venteval::config::read_json::<LogisticModel>(p),
            VentevalPropensity,
        )
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`venteval_propensity_load`]; it
/// must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn venteval_propensity_free(model: *mut VentevalPropensity) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Propensity score for the 10 type features.
///
/// # Safety
/// `model` must be NULL or a live handle; `features` must be NULL or
/// point to `VENTEVAL_N_TYPE_FEATURES` doubles; `z` must be NULL or valid
/// for a write.
#[no_mangle]
pub unsafe extern "C" fn venteval_propensity_predict(
    model: *const VentevalPropensity,
    features: *const f64,
    z: *mut f64,
) -> c_int {
    guarded(|| {
        if model.is_null() || features.is_null() {
            return record_error(
                VENTEVAL_ERR_NULL_POINTER,
                "venteval_propensity_predict: NULL argument",
            );
        }
        if let Err(code) = require_out(z, "venteval_propensity_predict") {
            return code;
        }
        let mut x = [0.0; N_TYPE_FEATURES];
        x.copy_from_slice(std::slice::from_raw_parts(features, N_TYPE_FEATURES));
        match (*model).0.predict(&x) {
            Ok(p) => {
                *z = p;
                VENTEVAL_OK
            }
            Err(e) => record_vent_error(&e),
        }
    })
}

/// Load a fitted transition model (`nwe.json`).
///
/// # Safety
/// Same contract as [`venteval_policy_load`].
#[no_mangle]
pub unsafe extern "C" fn venteval_nwe_load(
    path: *const c_char,
    out: *mut *mut VentevalNwe,
) -> c_int {
    guarded(|| {
        load_handle(
            path,
            out,
            "venteval_nwe_load",
            |p| venteval::config::read_json::<NweModel>(p),
            VentevalNwe,
        )
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`venteval_nwe_load`]; it must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn venteval_nwe_free(model: *mut VentevalNwe) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicted 13-dimensional next-state target (12 dynamic features plus
/// the propensity slot) for a query (state, action, z). `fallback` is set
/// to 1 when the nearest-neighbor fallback produced the prediction.
///
/// # Safety
/// `model` must be NULL or a live handle; `state` must be NULL or point
/// to `VENTEVAL_STATE_DIM` doubles; `next_targets` must be NULL or point
/// to `VENTEVAL_TARGET_DIM` writable doubles; `fallback` must be NULL or
/// valid for a write.
#[no_mangle]
pub unsafe extern "C" fn venteval_nwe_predict(
    model: *const VentevalNwe,
    state: *const f64,
    vt_bin: u8,
    peep_bin: u8,
    fio2_bin: u8,
    z: f64,
    next_targets: *mut f64,
    fallback: *mut c_int,
) -> c_int {
    guarded(|| {
        if model.is_null() || state.is_null() {
            return record_error(
                VENTEVAL_ERR_NULL_POINTER,
                "venteval_nwe_predict: NULL argument",
            );
        }
        if let Err(code) = require_out(next_targets, "venteval_nwe_predict") {
            return code;
        }
        if let Err(code) = require_out(fallback, "venteval_nwe_predict") {
            return code;
        }
        let a = match ActionTriple::new(vt_bin, peep_bin, fio2_bin) {
            Ok(a) => a,
            Err(e) => return record_vent_error(&e),
        };
        let mut s = StateVector([0.0; STATE_DIM]);
        s.0.copy_from_slice(std::slice::from_raw_parts(state, STATE_DIM));
        match (*model).0.predict_next_state(&s, a, z) {
            Ok((target, pd)) => {
                std::ptr::copy_nonoverlapping(target.as_ptr(), next_targets, TARGET_DIM);
                *fallback = pd.fallback.into();
                VENTEVAL_OK
            }
            Err(e) => record_vent_error(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// The hand-written header must declare exactly the error codes and
    /// dimension constants this crate exports.
    #[test]
    fn header_constants_match() {
        let header = include_str!("../include/venteval.h");
        let mut defines = BTreeMap::new();
        for line in header.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("#define VENTEVAL_") {
                let mut parts = rest.split_whitespace();
                if let (Some(name), Some(value)) = (parts.next(), parts.next()) {
                    if let Ok(value) = value.parse::<i64>() {
                        defines.insert(format!("VENTEVAL_{name}"), value);
                    }
                }
            }
        }
        let expected: &[(&str, i64)] = &[
            ("VENTEVAL_OK", VENTEVAL_OK as i64),
            ("VENTEVAL_ERR_INVALID_ARGUMENT", VENTEVAL_ERR_INVALID_ARGUMENT as i64),
            ("VENTEVAL_ERR_DATA", VENTEVAL_ERR_DATA as i64),
            ("VENTEVAL_ERR_NUMERIC", VENTEVAL_ERR_NUMERIC as i64),
            ("VENTEVAL_ERR_IO", VENTEVAL_ERR_IO as i64),
            ("VENTEVAL_ERR_SERDE", VENTEVAL_ERR_SERDE as i64),
            ("VENTEVAL_ERR_NULL_POINTER", VENTEVAL_ERR_NULL_POINTER as i64),
            ("VENTEVAL_ERR_UTF8", VENTEVAL_ERR_UTF8 as i64),
            ("VENTEVAL_ERR_BUFFER_TOO_SMALL", VENTEVAL_ERR_BUFFER_TOO_SMALL as i64),
            ("VENTEVAL_ERR_PANIC", VENTEVAL_ERR_PANIC as i64),
            ("VENTEVAL_STATE_DIM", STATE_DIM as i64),
            ("VENTEVAL_TARGET_DIM", TARGET_DIM as i64),
            ("VENTEVAL_N_TYPE_FEATURES", N_TYPE_FEATURES as i64),
        ];
        for (name, value) in expected {
            assert_eq!(defines.get(*name), Some(value), "header constant {name}");
        }
        assert_eq!(defines.len(), expected.len(), "header defines extra constants");

        // Every exported function must be declared.
        for symbol in [
            "venteval_version",
            "venteval_last_error",
            "venteval_discretize_action",
            "venteval_representative_action",
            "venteval_reward",
            "venteval_policy_load",
            "venteval_policy_free",
            "venteval_policy_kind",
            "venteval_policy_decide",
            "venteval_propensity_load",
            "venteval_propensity_free",
            "venteval_propensity_predict",
            "venteval_nwe_load",
            "venteval_nwe_free",
            "venteval_nwe_predict",
        ] {
            assert!(header.contains(symbol), "header is missing {symbol}");
        }
    }
}
