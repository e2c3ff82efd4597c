//! C ABI over the harness core.
//!
//! Runs are opaque heap handles created by `woz_run_new` and released by
//! `woz_run_free`. Every fallible call returns a [`WozStatus`]; on failure
//! `woz_last_error` describes what went wrong on the calling thread. Strings
//! handed out through `out` parameters are owned by the caller and must be
//! released with `woz_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use uuid::Uuid;
use woz_harness::analyzer::{self, AnnotationFilter};
use woz_harness::harness::default_color;
use woz_harness::ids::{IdSource, SeededIds};
use woz_harness::session::{AnnotationKind, AnnotationPayload, Author, NewAnnotation, Origin, PilotRun, Role, SessionError};
use woz_harness::sync::{estimate_offset, PingSample};
use woz_harness::Timestamp;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WozStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    RunNotActive = 4,
    RunNotStopped = 5,
    Rejected = 6,
    NoSamples = 7,
    Panic = 99,
}

/// One ping exchange: `t1`/`t4` on the requester clock, `t2`/`t3` on the
/// responder clock, all in ms.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WozPingSample {
    pub t1: i64,
    pub t2: i64,
    pub t3: i64,
    pub t4: i64,
}

/// Opaque run handle.
pub struct WozRun {
    run: PilotRun,
    ids: SeededIds,
    author: Author,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(WozStatus, String);

impl From<SessionError> for Fail {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::RunNotActive => WozStatus::RunNotActive,
            SessionError::RunNotStopped => WozStatus::RunNotStopped,
            _ => WozStatus::Rejected,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WozStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WozStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside the harness library");
            WozStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(WozStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(WozStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or a handle from `woz_run_new` that is not used elsewhere
/// during the call.
unsafe fn handle<'a>(p: *mut WozRun) -> Result<&'a mut WozRun, Fail> {
    p.as_mut().ok_or_else(|| Fail(WozStatus::NullPointer, "run handle is null".into()))
}

fn hand_out(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(WozStatus::NullPointer, "out is null".into()));
    }
    let c = CString::new(s).map_err(|_| Fail(WozStatus::Rejected, "output contains NUL".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Creates a running pilot run started at `start_ms`. `role` is
/// `single_user`, `wizard`, or `observer`. `seed` fixes the identifiers.
///
/// # Safety
/// String arguments are NUL-terminated; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn woz_run_new(
    participant: *const c_char,
    role: *const c_char,
    instance: *const c_char,
    start_ms: i64,
    seed: u64,
    out: *mut *mut WozRun,
) -> WozStatus {
    guard(|| {
        let participant = text(participant, "participant")?;
        let role: Role = text(role, "role")?.parse().map_err(|e: String| Fail(WozStatus::InvalidArgument, e))?;
        let instance = text(instance, "instance")?;
        if instance.is_empty() {
            return Err(Fail(WozStatus::InvalidArgument, "instance is empty".into()));
        }
        if out.is_null() {
            return Err(Fail(WozStatus::NullPointer, "out is null".into()));
        }
        let mut ids = SeededIds::new(seed);
        let run = PilotRun::new(ids.next_id(), Uuid::nil(), participant, "ffi", 0, Timestamp(start_ms), Vec::new());
        let boxed = Box::new(WozRun { run, ids, author: Author::new(role, instance.to_string()) });
        *out = Box::into_raw(boxed);
        Ok(())
    })
}

/// # Safety
/// `run` is null or a handle from `woz_run_new` not freed before.
#[no_mangle]
pub unsafe extern "C" fn woz_run_free(run: *mut WozRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Records a live annotation of `kind` (e.g. `correct`, `counter`,
/// `custom:target_change`) at `event_ms`. `note` may be null. Kinds that
/// carry images or transcripts are rejected.
///
/// # Safety
/// `run` is a live handle; strings are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn woz_run_record(run: *mut WozRun, kind: *const c_char, event_ms: i64, note: *const c_char) -> WozStatus {
    guard(|| {
        let h = handle(run)?;
        let kind: AnnotationKind = text(kind, "kind")?.parse().map_err(|e: String| Fail(WozStatus::InvalidArgument, e))?;
        let note = if note.is_null() { "" } else { text(note, "note")? };
        let new = NewAnnotation {
            id: h.ids.next_id(),
            author: h.author.clone(),
            function_name: kind.label().to_string(),
            color: default_color(&kind).to_string(),
            kind,
            event_time: Timestamp(event_ms),
            payload: AnnotationPayload::Empty,
            note: note.to_string(),
            origin: Origin::Live,
        };
        h.run.record(new)?;
        Ok(())
    })
}

/// # Safety
/// `run` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn woz_run_stop(run: *mut WozRun, at_ms: i64) -> WozStatus {
    guard(|| {
        handle(run)?.run.stop(Timestamp(at_ms))?;
        Ok(())
    })
}

/// Number of annotations in the run; 0 for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn woz_run_annotation_count(run: *const WozRun) -> usize {
    run.as_ref().map_or(0, |h| h.run.annotations().len())
}

/// Live statistics as JSON with sorted keys.
///
/// # Safety
/// `run` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn woz_run_stats_json(run: *mut WozRun, out: *mut *mut c_char) -> WozStatus {
    guard(|| {
        let h = handle(run)?;
        let v = serde_json::to_value(h.run.stats()).map_err(|e| Fail(WozStatus::Rejected, e.to_string()))?;
        hand_out(v.to_string(), out)
    })
}

/// Canonical CSV export of the whole log.
///
/// # Safety
/// `run` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn woz_run_export_csv(run: *mut WozRun, out: *mut *mut c_char) -> WozStatus {
    guard(|| {
        let h = handle(run)?;
        let doc = analyzer::export_csv(&h.run, &AnnotationFilter::default()).map_err(|e| Fail(WozStatus::Rejected, e.to_string()))?;
        hand_out(doc, out)
    })
}

/// Offset (responder minus requester) and RTT of the minimum-RTT sample.
///
/// # Safety
/// `samples` points to `len` readable samples; the out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn woz_estimate_offset(
    samples: *const WozPingSample,
    len: usize,
    out_offset_ms: *mut f64,
    out_rtt_ms: *mut i64,
) -> WozStatus {
    guard(|| {
        if (samples.is_null() && len > 0) || out_offset_ms.is_null() || out_rtt_ms.is_null() {
            return Err(Fail(WozStatus::NullPointer, "null argument".into()));
        }
        let raw = if len == 0 { &[][..] } else { std::slice::from_raw_parts(samples, len) };
        let parsed: Vec<PingSample> = raw.iter().map(|s| PingSample::new(s.t1, s.t2, s.t3, s.t4)).collect();
        let est = estimate_offset(&parsed).map_err(|e| Fail(WozStatus::NoSamples, e.to_string()))?;
        *out_offset_ms = est.offset_ms;
        *out_rtt_ms = est.rtt_ms;
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, not freed before.
#[no_mangle]
pub unsafe extern "C" fn woz_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn woz_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn woz_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
