// SPDX-License-Identifier: Apache-2.0

//! C interface to the handler language, the patch templates and the
//! response normalizer.
//!
//! Every fallible function returns an [`ItzalStatus`]. On failure the
//! message is available from [`itzal_last_error`] on the same thread.
//! Strings returned through out-parameters are owned by the caller and
//! released with [`itzal_string_free`]; programs with
//! [`itzal_program_free`]; byte buffers with [`itzal_bytes_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use itzal::lang::{execute_handler, parse_program, render_program, ExecOutcome, FailurePoint, Program, Value};
use itzal::message::{Request, Response};
use itzal::oracle::RequestOracle;
use itzal::patch::{apply_patch, enumerate_patches, Patch, ReturnEarlyDefaults};
use itzal::regression::{NormalizationRule, Normalizer};
use itzal::state::KvState;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItzalStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidJson = 4,
    UnknownHandler = 5,
    Patch = 6,
    Rule = 7,
    Panic = 8,
}

/// A parsed program.
pub struct ItzalProgram {
    program: Program,
}

/// Caller-owned bytes.
#[repr(C)]
pub struct ItzalBytes {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(ItzalStatus, String);

type Result<T> = std::result::Result<T, Failure>;

fn fail<T>(status: ItzalStatus, msg: impl ToString) -> Result<T> {
    Err(Failure(status, msg.to_string()))
}

/// Runs `f`, recording its error or panic.
fn guard(f: impl FnOnce() -> Result<()>) -> ItzalStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ItzalStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ItzalStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str> {
    if p.is_null() {
        return fail(ItzalStatus::NullArgument, format!("`{name}` is null"));
    }
    // SAFETY: caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .or_else(|_| fail(ItzalStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn json_arg<T: serde::de::DeserializeOwned>(p: *const c_char, name: &str) -> Result<T> {
    let s = unsafe { str_arg(p, name)? };
    serde_json::from_str(s).or_else(|e| fail(ItzalStatus::InvalidJson, format!("`{name}`: {e}")))
}

unsafe fn program_arg<'a>(p: *const ItzalProgram) -> Result<&'a Program> {
    if p.is_null() {
        return fail(ItzalStatus::NullArgument, "`program` is null");
    }
    // SAFETY: non-null handles come from this library and are still live.
    Ok(unsafe { &(*p).program })
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T> {
    if p.is_null() {
        return fail(ItzalStatus::NullArgument, format!("`{name}` is null"));
    }
    // SAFETY: caller passes a writable location.
    Ok(unsafe { &mut *p })
}

fn into_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\\u0000")).expect("NULs replaced").into_raw()
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).or_else(|e| fail(ItzalStatus::InvalidJson, e))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn itzal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn itzal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses handler source into a new program.
///
/// # Safety
/// `source` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn itzal_program_parse(source: *const c_char, out: *mut *mut ItzalProgram) -> ItzalStatus {
    guard(|| {
        let out = unsafe { out_arg(out, "out")? };
        *out = ptr::null_mut();
        let src = unsafe { str_arg(source, "source")? };
        let program = parse_program(src).or_else(|e| fail(ItzalStatus::Parse, e))?;
        *out = Box::into_raw(Box::new(ItzalProgram { program }));
        Ok(())
    })
}

/// # Safety
/// `program` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn itzal_program_free(program: *mut ItzalProgram) {
    if !program.is_null() {
        // SAFETY: the handle was created by Box::into_raw.
        drop(unsafe { Box::from_raw(program) });
    }
}

/// Canonical source of the program.
///
/// # Safety
/// `program` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn itzal_program_render(program: *const ItzalProgram, out: *mut *mut c_char) -> ItzalStatus {
    guard(|| {
        let out = unsafe { out_arg(out, "out")? };
        *out = ptr::null_mut();
        let p = unsafe { program_arg(program)? };
        *out = into_c(render_program(p));
        Ok(())
    })
}

/// Runs `handler` on a JSON request against JSON state (an object, or
/// null for empty). Writes `{"outcome", "executed_lines", "state",
/// "state_version"}` as JSON.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings, `program` a live handle
/// and `out` writable. `state_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn itzal_program_execute(
    program: *const ItzalProgram,
    handler: *const c_char,
    request_json: *const c_char,
    state_json: *const c_char,
    out: *mut *mut c_char,
) -> ItzalStatus {
    guard(|| {
        let out = unsafe { out_arg(out, "out")? };
        *out = ptr::null_mut();
        let p = unsafe { program_arg(program)? };
        let handler = unsafe { str_arg(handler, "handler")? };
        let request: Request = unsafe { json_arg(request_json, "request_json")? };
        let entries: BTreeMap<String, Value> = if state_json.is_null() {
            BTreeMap::new()
        } else {
            unsafe { json_arg::<Option<BTreeMap<String, Value>>>(state_json, "state_json")? }.unwrap_or_default()
        };
        let mut state = KvState::from_entries(entries);
        let ex = execute_handler(p, handler, &request, &mut state).or_else(|e| fail(ItzalStatus::UnknownHandler, e))?;
        *out = into_c(to_json(&serde_json::json!({
            "outcome": ex.outcome,
            "executed_lines": ex.executed_lines,
            "state": state.entries(),
            "state_version": state.version(),
        }))?);
        Ok(())
    })
}

/// Candidate patches for a JSON failure point, in template order.
/// `early_json` gives the early-return status and body, or null for the
/// defaults.
///
/// # Safety
/// As for [`itzal_program_execute`]; `early_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn itzal_program_enumerate_patches(
    program: *const ItzalProgram,
    failure_point_json: *const c_char,
    early_json: *const c_char,
    out: *mut *mut c_char,
) -> ItzalStatus {
    guard(|| {
        let out = unsafe { out_arg(out, "out")? };
        *out = ptr::null_mut();
        let p = unsafe { program_arg(program)? };
        let fp: FailurePoint = unsafe { json_arg(failure_point_json, "failure_point_json")? };
        let early: ReturnEarlyDefaults = if early_json.is_null() {
            ReturnEarlyDefaults::default()
        } else {
            unsafe { json_arg(early_json, "early_json")? }
        };
        let patches = enumerate_patches(p, &fp, &early).or_else(|e| fail(ItzalStatus::Patch, e))?;
        *out = into_c(to_json(&patches)?);
        Ok(())
    })
}

/// Applies a JSON patch, producing a new program. The input is unchanged.
///
/// # Safety
/// As for [`itzal_program_execute`].
#[no_mangle]
pub unsafe extern "C" fn itzal_program_apply_patch(
    program: *const ItzalProgram,
    patch_json: *const c_char,
    out: *mut *mut ItzalProgram,
) -> ItzalStatus {
    guard(|| {
        let out = unsafe { out_arg(out, "out")? };
        *out = ptr::null_mut();
        let p = unsafe { program_arg(program)? };
        let patch: Patch = unsafe { json_arg(patch_json, "patch_json")? };
        let patched = apply_patch(p, &patch).or_else(|e| fail(ItzalStatus::Patch, e))?;
        *out = Box::into_raw(Box::new(ItzalProgram { program: patched.program }));
        Ok(())
    })
}

/// Normalizes `len` bytes at `body` with a JSON array of rules.
///
/// # Safety
/// `rules_json` must be a NUL-terminated string, `body` must point at
/// `len` readable bytes (or be null with `len == 0`), `out` writable.
#[no_mangle]
pub unsafe extern "C" fn itzal_normalize(
    rules_json: *const c_char,
    body: *const u8,
    len: usize,
    out: *mut ItzalBytes,
) -> ItzalStatus {
    guard(|| {
        let out = unsafe { out_arg(out, "out")? };
        *out = ItzalBytes { data: ptr::null_mut(), len: 0 };
        let rules: Vec<NormalizationRule> = unsafe { json_arg(rules_json, "rules_json")? };
        let body = if len == 0 {
            &[][..]
        } else if body.is_null() {
            return fail(ItzalStatus::NullArgument, "`body` is null");
        } else {
            // SAFETY: caller guarantees `len` readable bytes.
            unsafe { std::slice::from_raw_parts(body, len) }
        };
        let n = Normalizer::new(&rules).or_else(|e| fail(ItzalStatus::Rule, e))?;
        let mut v = n.normalize(body).into_boxed_slice();
        *out = ItzalBytes { data: v.as_mut_ptr(), len: v.len() };
        std::mem::forget(v);
        Ok(())
    })
}

/// Judges a JSON response and outcome with the default oracle. Writes the
/// verdict as JSON.
///
/// # Safety
/// As for [`itzal_program_execute`].
#[no_mangle]
pub unsafe extern "C" fn itzal_judge(
    response_json: *const c_char,
    outcome_json: *const c_char,
    out: *mut *mut c_char,
) -> ItzalStatus {
    guard(|| {
        let out = unsafe { out_arg(out, "out")? };
        *out = ptr::null_mut();
        let response: Response = unsafe { json_arg(response_json, "response_json")? };
        let outcome: ExecOutcome = unsafe { json_arg(outcome_json, "outcome_json")? };
        *out = into_c(to_json(&RequestOracle::default().judge(&response, &outcome))?);
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn itzal_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: `s` came from CString::into_raw.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// # Safety
/// `bytes` must have been filled by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn itzal_bytes_free(bytes: ItzalBytes) {
    if !bytes.data.is_null() {
        // SAFETY: data/len describe a boxed slice leaked by itzal_normalize.
        drop(unsafe { Box::from_raw(ptr::slice_from_raw_parts_mut(bytes.data, bytes.len)) });
    }
}
