//! C interface. Every function returns an [`EfStatus`]; on failure the
//! message is available from [`ef_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use efficientformer::arch::{count_macs, count_params, preset, ArchSpec};
use efficientformer::latency::{estimate_latency, reachable_keys, AttnShape, LatencyTable, SyntheticCost};
use efficientformer::slimming::{slim, SlimConfig, StaticOracle};
use efficientformer::supernet::{derive_arch, search_layout, Selection};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidArch = 4,
    Io = 5,
    Parse = 6,
    Latency = 7,
    Search = 8,
    TargetUnreachable = 9,
    Panic = 99,
}

/// Architecture spec handle.
pub struct EfArch {
    spec: ArchSpec,
}

/// Latency lookup table handle.
pub struct EfLut {
    table: LatencyTable,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn fail(status: EfStatus, msg: impl Into<String>) -> EfStatus {
    set_error(msg);
    status
}

fn guard<F: FnOnce() -> Result<(), (EfStatus, String)>>(f: F) -> EfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EfStatus::Ok
        }
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(EfStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (EfStatus, String)> {
    if p.is_null() {
        return Err((EfStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (EfStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (EfStatus, String)> {
    p.as_mut().ok_or_else(|| (EfStatus::NullPointer, format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (EfStatus, String)> {
    p.as_ref().ok_or_else(|| (EfStatus::NullPointer, format!("{name} is null")))
}

fn arch_err(e: efficientformer::arch::ArchError) -> (EfStatus, String) {
    use efficientformer::arch::ArchError as E;
    let s = match e {
        E::Invalid(_) => EfStatus::InvalidArch,
        E::UnknownPreset(_) => EfStatus::InvalidArgument,
        E::Json { .. } | E::SchemaVersion(_) => EfStatus::Parse,
        E::Io(_) => EfStatus::Io,
        _ => EfStatus::Search,
    };
    (s, e.to_string())
}

/// Message for the last failed call on this thread; empty after a success.
/// Owned by the library and valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ef_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ef_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ef_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a preset (`L1`, `L3`, `L7`, `toy`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_arch_preset(name: *const c_char, out: *mut *mut EfArch) -> EfStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let out = out_arg(out, "out")?;
        let spec = preset(name).map_err(arch_err)?;
        *out = Box::into_raw(Box::new(EfArch { spec }));
        Ok(())
    })
}

/// Parses an architecture JSON document. Structural validity is not checked.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_arch_from_json(json: *const c_char, out: *mut *mut EfArch) -> EfStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let spec = ArchSpec::from_json(json).map_err(arch_err)?;
        *out = Box::into_raw(Box::new(EfArch { spec }));
        Ok(())
    })
}

/// Serializes to JSON; release the string with `ef_string_free`.
///
/// # Safety
/// `arch` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_arch_to_json(arch: *const EfArch, out: *mut *mut c_char) -> EfStatus {
    guard(|| {
        let a = handle(arch, "arch")?;
        let out = out_arg(out, "out")?;
        *out = CString::new(a.spec.to_json()).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Writes the number of violations; returns `EF_STATUS_INVALID_ARCH` with
/// the list in the error message if there are any.
///
/// # Safety
/// `arch` must be a live handle; `violations` may be null.
#[no_mangle]
pub unsafe extern "C" fn ef_arch_validate(arch: *const EfArch, violations: *mut usize) -> EfStatus {
    guard(|| {
        let a = handle(arch, "arch")?;
        let v = efficientformer::arch::validate(&a.spec);
        if let Some(n) = violations.as_mut() {
            *n = v.len();
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(arch_err(efficientformer::arch::ArchError::Invalid(v)))
        }
    })
}

/// Trainable parameters and per-image MACs.
///
/// # Safety
/// `arch` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_arch_count(arch: *const EfArch, params: *mut u64, macs: *mut u64) -> EfStatus {
    guard(|| {
        let a = handle(arch, "arch")?;
        let params = out_arg(params, "params")?;
        let macs = out_arg(macs, "macs")?;
        *params = count_params(&a.spec).map_err(arch_err)? as u64;
        *macs = count_macs(&a.spec).map_err(arch_err)?;
        Ok(())
    })
}

/// # Safety
/// `arch` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ef_arch_free(arch: *mut EfArch) {
    if !arch.is_null() {
        drop(Box::from_raw(arch));
    }
}

/// Loads a latency table CSV. Fingerprint warnings are dropped.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_lut_load(path: *const c_char, out: *mut *mut EfLut) -> EfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let loaded = LatencyTable::load_csv(path).map_err(|e| (EfStatus::Latency, e.to_string()))?;
        *out = Box::into_raw(Box::new(EfLut { table: loaded.table }));
        Ok(())
    })
}

/// Deterministic synthetic table covering every key of a search skeleton.
///
/// # Safety
/// `skeleton` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_lut_synthetic(skeleton: *const c_char, out: *mut *mut EfLut) -> EfStatus {
    guard(|| {
        let name = str_arg(skeleton, "skeleton")?;
        let out = out_arg(out, "out")?;
        let l = search_layout(name).map_err(arch_err)?;
        let table = SyntheticCost::new(AttnShape::of_layout(&l)).table(reachable_keys(&l));
        *out = Box::into_raw(Box::new(EfLut { table }));
        Ok(())
    })
}

/// # Safety
/// `lut` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_lut_len(lut: *const EfLut, len: *mut usize) -> EfStatus {
    guard(|| {
        let t = handle(lut, "lut")?;
        *out_arg(len, "len")? = t.table.len();
        Ok(())
    })
}

/// Sum of table medians over the architecture's components, in seconds.
///
/// # Safety
/// `lut` and `arch` must be live handles; `seconds` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_lut_estimate(lut: *const EfLut, arch: *const EfArch, seconds: *mut f64) -> EfStatus {
    guard(|| {
        let t = handle(lut, "lut")?;
        let a = handle(arch, "arch")?;
        let out = out_arg(seconds, "seconds")?;
        *out = estimate_latency(&a.spec, &t.table).map_err(|e| (EfStatus::Latency, e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `lut` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ef_lut_free(lut: *mut EfLut) {
    if !lut.is_null() {
        drop(Box::from_raw(lut));
    }
}

/// Greedy slimming of a search skeleton against `lut` with fixed per-path
/// importances (`n` must equal the skeleton's MetaPath count). Stops at
/// `target_frac` of the initial estimate. On success `out` holds the
/// derived architecture; `EF_STATUS_TARGET_UNREACHABLE` still fills `out`
/// with the smallest network reached.
///
/// # Safety
/// Pointers must be valid; `importance` must hold `n` floats.
#[no_mangle]
pub unsafe extern "C" fn ef_slim_static(
    skeleton: *const c_char,
    lut: *const EfLut,
    importance: *const f32,
    n: usize,
    target_frac: f64,
    out: *mut *mut EfArch,
    final_seconds: *mut f64,
) -> EfStatus {
    let mut unreachable = None;
    let st = guard(|| {
        let name = str_arg(skeleton, "skeleton")?;
        let t = handle(lut, "lut")?;
        if importance.is_null() {
            return Err((EfStatus::NullPointer, "importance is null".into()));
        }
        let out = out_arg(out, "out")?;
        let fin = out_arg(final_seconds, "final_seconds")?;
        let layout = search_layout(name).map_err(arch_err)?;
        let paths: usize = layout.depths.iter().sum();
        if n != paths {
            return Err((EfStatus::InvalidArgument, format!("{n} importances for {paths} MetaPaths")));
        }
        if !(target_frac > 0.0) {
            return Err((EfStatus::InvalidArgument, format!("target_frac must be positive, got {target_frac}")));
        }
        let per_path = std::slice::from_raw_parts(importance, n).to_vec();
        let initial = Selection::from_layout(&layout);
        let search = |e: &dyn std::fmt::Display| (EfStatus::Search, e.to_string());
        let spec0 = derive_arch(&layout, &initial).map_err(|e| search(&e))?;
        let est0 = estimate_latency(&spec0, &t.table).map_err(|e| (EfStatus::Latency, e.to_string()))?;
        let mut oracle = StaticOracle { layout: layout.clone(), per_path };
        let r = slim(&layout, &initial, &t.table, &SlimConfig::new(target_frac * est0), &mut oracle)
            .map_err(|e| search(&e))?;
        *fin = r.final_latency_s;
        *out = Box::into_raw(Box::new(EfArch { spec: r.spec }));
        if !r.reached {
            unreachable = Some(r.diagnostics.join("; "));
        }
        Ok(())
    });
    match (st, unreachable) {
        (EfStatus::Ok, Some(msg)) => fail(EfStatus::TargetUnreachable, msg),
        (s, _) => s,
    }
}
