//! C ABI over `pguard-core`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Strings returned through `out`
//! parameters are NUL-terminated, heap-allocated and released with
//! [`pg_string_free`]. Every function returns a [`PgStatus`]; on failure
//! [`pg_last_error_message`] describes the error until the next failing
//! call on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pguard_core::diff::diff;
use pguard_core::dom::{parse, serialize, DomTree};
use pguard_core::merge::{ConflictPolicy, MergeError};
use pguard_core::monitor::MonitorError;
use pguard_core::patch::apply;
use pguard_core::records::{format_entries, parse_table};
use pguard_core::report::{dump_store, guarded_registry, run_command, Mode, RunError};
use pguard_core::scenario::{load_scenario, parse_scenario, Scenario};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Records = 4,
    Apply = 5,
    Scenario = 6,
    Conflict = 7,
    PrivilegeDenied = 8,
    Internal = 9,
    Panic = 10,
}

/// Run mode for [`pg_scenario_run`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgMode {
    Unguarded = 0,
    Guarded = 1,
    Differential = 2,
}

/// Conflict policy; `SCENARIO` keeps the policy from the scenario file.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgPolicy {
    Scenario = 0,
    LastWins = 1,
    FirstWins = 2,
    Fail = 3,
}

/// Report layout for [`pg_scenario_run`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgFormat {
    Table = 0,
    TableMasked = 1,
    Records = 2,
}

/// A parsed DOM tree.
pub struct PgTree {
    tree: DomTree,
}

/// A parsed scenario.
pub struct PgScenario {
    scenario: Scenario,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (PgStatus, String);

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', "\\0")).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn call(f: impl FnOnce() -> Result<(), Failure>) -> PgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {what}"));
            PgStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    (PgStatus::NullArgument, format!("{name} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (PgStatus::InvalidUtf8, format!("{name}: {e}")))
}

/// # Safety
/// `p` is null or a live handle of type `T`.
unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

/// # Safety
/// `out` is null or writable.
unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\\0")).expect("NUL bytes replaced").into_raw()
}

fn run_failure(e: RunError) -> Failure {
    let status = match &e {
        RunError::Scenario(_) => PgStatus::Scenario,
        RunError::Records(_) => PgStatus::Records,
        RunError::Merge(MergeError::ConflictDetected { .. })
        | RunError::Monitor(MonitorError::Merge(MergeError::ConflictDetected { .. })) => PgStatus::Conflict,
        RunError::Monitor(MonitorError::PrivilegeDenied(_)) => PgStatus::PrivilegeDenied,
        _ => PgStatus::Internal,
    };
    (status, e.to_string())
}

/// Library version as a static string. Do not free.
#[no_mangle]
pub extern "C" fn pg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on this thread. Do not free.
#[no_mangle]
pub extern "C" fn pg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or a string returned through an `out` parameter of this
/// library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn pg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses HTML leniently into a tree.
///
/// # Safety
/// `html` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_tree_parse(html: *const c_char, out: *mut *mut PgTree) -> PgStatus {
    call(|| {
        let html = text(html, "html")?;
        let tree = Box::into_raw(Box::new(PgTree { tree: parse(html) }));
        put(out, tree, "out").inspect_err(|_| drop(Box::from_raw(tree)))
    })
}

/// Serializes a tree to canonical HTML.
///
/// # Safety
/// `tree` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_tree_serialize(tree: *const PgTree, out: *mut *mut c_char) -> PgStatus {
    call(|| {
        let t = handle(tree, "tree")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, c_string(serialize(&t.tree)), "out")
    })
}

/// Node count of a tree, or 0 for null.
///
/// # Safety
/// `tree` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pg_tree_size(tree: *const PgTree) -> usize {
    catch_unwind(AssertUnwindSafe(|| tree.as_ref().map_or(0, |t| t.tree.size()))).unwrap_or(0)
}

/// Releases a tree. Null is ignored.
///
/// # Safety
/// `tree` is null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pg_tree_free(tree: *mut PgTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Edit script from `pre` to `post` as patch records.
///
/// # Safety
/// `pre` and `post` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_tree_diff(pre: *const PgTree, post: *const PgTree, out: *mut *mut c_char) -> PgStatus {
    call(|| {
        let (a, b) = (handle(pre, "pre")?, handle(post, "post")?);
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, c_string(format_entries(0, &diff(&a.tree, &b.tree))), "out")
    })
}

/// Applies patch records, in order, to a copy of `tree`.
///
/// # Safety
/// `tree` is a live handle; `records` is a NUL-terminated string; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pg_tree_apply(tree: *const PgTree, records: *const c_char, out: *mut *mut PgTree) -> PgStatus {
    call(|| {
        let t = handle(tree, "tree")?;
        let table = parse_table(text(records, "records")?).map_err(|e| (PgStatus::Records, e.to_string()))?;
        let entries: Vec<_> = table.entries().iter().map(|(_, e)| e.clone()).collect();
        let result = apply(&t.tree, &entries).map_err(|e| (PgStatus::Apply, e.to_string()))?;
        let h = Box::into_raw(Box::new(PgTree { tree: result }));
        put(out, h, "out").inspect_err(|_| drop(Box::from_raw(h)))
    })
}

fn scenario_handle(s: Scenario, out: *mut *mut PgScenario) -> Result<(), Failure> {
    let h = Box::into_raw(Box::new(PgScenario { scenario: s }));
    // SAFETY: callers pass the caller-provided `out`, checked for null here.
    unsafe { put(out, h, "out").inspect_err(|_| drop(Box::from_raw(h))) }
}

/// Parses scenario text.
///
/// # Safety
/// `source` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_scenario_parse(source: *const c_char, out: *mut *mut PgScenario) -> PgStatus {
    call(|| {
        let s = parse_scenario(text(source, "source")?).map_err(|e| (PgStatus::Scenario, e.to_string()))?;
        scenario_handle(s, out)
    })
}

/// Loads a scenario file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_scenario_load(path: *const c_char, out: *mut *mut PgScenario) -> PgStatus {
    call(|| {
        let s = load_scenario(text(path, "path")?).map_err(|e| (PgStatus::Scenario, e.to_string()))?;
        scenario_handle(s, out)
    })
}

/// Releases a scenario. Null is ignored.
///
/// # Safety
/// `scenario` is null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pg_scenario_free(scenario: *mut PgScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

fn mode_of(mode: u32) -> Result<Mode, Failure> {
    match mode {
        m if m == PgMode::Unguarded as u32 => Ok(Mode::Unguarded),
        m if m == PgMode::Guarded as u32 => Ok(Mode::Guarded),
        m if m == PgMode::Differential as u32 => Ok(Mode::Differential),
        m => Err((PgStatus::InvalidArgument, format!("unknown mode {m}"))),
    }
}

fn policy_of(policy: u32) -> Result<Option<ConflictPolicy>, Failure> {
    match policy {
        p if p == PgPolicy::Scenario as u32 => Ok(None),
        p if p == PgPolicy::LastWins as u32 => Ok(Some(ConflictPolicy::LastWins)),
        p if p == PgPolicy::FirstWins as u32 => Ok(Some(ConflictPolicy::FirstWins)),
        p if p == PgPolicy::Fail as u32 => Ok(Some(ConflictPolicy::Fail)),
        p => Err((PgStatus::InvalidArgument, format!("unknown policy {p}"))),
    }
}

/// Runs a scenario. `mode`, `policy` and `format` take `PgMode`,
/// `PgPolicy` and `PgFormat` values. On success `out_report` receives the
/// report and `out_exit_code`, if not null, the command-line exit code
/// (0, or 3 when integrity violations were found).
///
/// # Safety
/// `scenario` is a live handle; `out_report` is writable; `out_exit_code`
/// is null or writable.
#[no_mangle]
pub unsafe extern "C" fn pg_scenario_run(
    scenario: *const PgScenario,
    mode: u32,
    policy: u32,
    format: u32,
    out_report: *mut *mut c_char,
    out_exit_code: *mut i32,
) -> PgStatus {
    call(|| {
        let s = handle(scenario, "scenario")?;
        let (mode, policy) = (mode_of(mode)?, policy_of(policy)?);
        if out_report.is_null() {
            return Err(null("out_report"));
        }
        let report = run_command(&s.scenario, mode, policy).map_err(run_failure)?;
        let text = match format {
            f if f == PgFormat::Table as u32 => report.render_table(false),
            f if f == PgFormat::TableMasked as u32 => report.render_table(true),
            f if f == PgFormat::Records as u32 => report.render_records(),
            f => return Err((PgStatus::InvalidArgument, format!("unknown format {f}"))),
        };
        if !out_exit_code.is_null() {
            out_exit_code.write(report.exit_code());
        }
        put(out_report, c_string(text), "out_report")
    })
}

/// Checks the guarded slot layout. `out_count` receives the number of
/// violations and `out_report`, if not null, one line per violation.
///
/// # Safety
/// `scenario` is a live handle; `out_count` is writable; `out_report` is
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn pg_scenario_verify(
    scenario: *const PgScenario,
    out_count: *mut usize,
    out_report: *mut *mut c_char,
) -> PgStatus {
    call(|| {
        let s = handle(scenario, "scenario")?;
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        let spec = s.scenario.guard_spec();
        let (g, _) = guarded_registry(&s.scenario, spec.config).map_err(run_failure)?;
        let violations = g.verify(&spec.privileges).map_err(|e| run_failure(e.into()))?;
        out_count.write(violations.len());
        if !out_report.is_null() {
            let lines: String = violations.iter().map(|v| format!("{v}\n")).collect();
            out_report.write(c_string(lines));
        }
        Ok(())
    })
}

/// The guarded run's patch store as records.
///
/// # Safety
/// `scenario` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pg_scenario_dump_store(scenario: *const PgScenario, policy: u32, out: *mut *mut c_char) -> PgStatus {
    call(|| {
        let s = handle(scenario, "scenario")?;
        let policy = policy_of(policy)?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, c_string(dump_store(&s.scenario, policy).map_err(run_failure)?), "out")
    })
}
