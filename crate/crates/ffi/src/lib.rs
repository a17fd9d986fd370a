//! C ABI over the router client and the topology helpers.
//!
//! Every function returns an `SbStatus`. On failure a message is kept per
//! thread and can be read with `sb_last_error`. Strings handed out by this
//! library must be released with `sb_string_free`; client handles with
//! `sb_client_free`. Documents, filters and results travel as JSON text.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use libc::c_char;
use shardbatch::bench;
use shardbatch::model::{Filter, MetricDocument};
use shardbatch::orchestrator::{assign_roles, NodeFile};
use shardbatch::{Error, RouterClient};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, bad JSON or an out-of-range argument.
    InvalidArgument = 1,
    /// Connect, read or write failed, or timed out.
    Transport = 2,
    /// Cluster token missing or wrong.
    Auth = 3,
    NotFound = 4,
    MalformedFilter = 5,
    /// A find lost one or more shards; no documents were returned.
    PartialResults = 6,
    /// No shard or config server could serve the request.
    Unavailable = 7,
    Protocol = 8,
    /// Any other failure reported by the cluster.
    Failed = 9,
    /// A Rust panic was caught at the boundary.
    Panic = 10,
}

/// Opaque connection to one router.
pub struct SbClient {
    inner: RouterClient,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SbStatus {
    match e {
        Error::InvalidArgument(_) | Error::TooFewNodes(_) | Error::InvalidCount(_) | Error::Format(_) => {
            SbStatus::InvalidArgument
        }
        Error::Timeout(_) | Error::NodeDown(_) | Error::Io(_) => SbStatus::Transport,
        Error::Auth => SbStatus::Auth,
        Error::NotFound(_) => SbStatus::NotFound,
        Error::MalformedFilter(_) => SbStatus::MalformedFilter,
        Error::PartialResults { .. } => SbStatus::PartialResults,
        Error::ClusterUnavailable(_) | Error::MetadataUnavailable(_) => SbStatus::Unavailable,
        Error::Protocol(_) | Error::UnknownType(_) | Error::Oversize(_) => SbStatus::Protocol,
        _ => SbStatus::Failed,
    }
}

struct Failure(SbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(SbStatus::InvalidArgument, format!("invalid JSON: {e}"))
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SbStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            SbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn client_arg<'a>(p: *mut SbClient) -> Result<&'a mut SbClient, Failure> {
    p.as_mut().ok_or_else(|| invalid("client is null"))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{name} is null")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(SbStatus::Failed, "result contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned through an `out_json` parameter.
///
/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Days of metrics to generate for a job of `nodes` nodes.
///
/// # Safety
/// `out_days` must be NULL or point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sb_days_for_nodes(nodes: usize, out_days: *mut u32) -> SbStatus {
    guard(|| {
        let out = out_arg(out_days, "out_days")?;
        *out = bench::days_for_nodes(nodes, None)?;
        Ok(())
    })
}

/// Splits the hosts of a nodefile (one hostname per line) into roles.
/// Writes `{"config_nodes":[..],"shard_nodes":[..],"router_nodes":[..],
/// "client_nodes":[..]}` to `out_json`.
///
/// # Safety
/// `nodefile_text` must be a NUL-terminated string; `out_json` must point to
/// writable memory.
#[no_mangle]
pub unsafe extern "C" fn sb_assign_roles(
    nodefile_text: *const c_char,
    strict: bool,
    out_json: *mut *mut c_char,
) -> SbStatus {
    guard(|| {
        let text = str_arg(nodefile_text, "nodefile_text")?;
        let out = out_arg(out_json, "out_json")?;
        let nodes = NodeFile::parse(text);
        let roles = assign_roles(&nodes.hostnames, strict)?;
        *out = into_c_string(serde_json::to_string(&roles)?)?;
        Ok(())
    })
}

/// Connects to a router at `host:port`.
///
/// # Safety
/// `endpoint` must be a NUL-terminated string; `out_client` must point to
/// writable memory.
#[no_mangle]
pub unsafe extern "C" fn sb_client_connect(
    endpoint: *const c_char,
    timeout_ms: u32,
    out_client: *mut *mut SbClient,
) -> SbStatus {
    guard(|| {
        let endpoint = str_arg(endpoint, "endpoint")?;
        let out = out_arg(out_client, "out_client")?;
        if timeout_ms == 0 {
            return Err(invalid("timeout_ms must be positive"));
        }
        let inner = RouterClient::connect(endpoint, Duration::from_millis(u64::from(timeout_ms)))?;
        *out = Box::into_raw(Box::new(SbClient { inner }));
        Ok(())
    })
}

/// Closes the connection and frees the handle.
///
/// # Safety
/// `client` must be NULL or a handle from `sb_client_connect`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_client_free(client: *mut SbClient) {
    if !client.is_null() {
        drop(Box::from_raw(client));
    }
}

/// # Safety
/// `client` must be a live handle from `sb_client_connect`.
#[no_mangle]
pub unsafe extern "C" fn sb_client_ping(client: *mut SbClient) -> SbStatus {
    guard(|| {
        client_arg(client)?.inner.ping()?;
        Ok(())
    })
}

/// Unordered insert of a JSON array of documents. Writes
/// `{"inserted_count":N,"errors":[{"batch_index":I,"code":..,"message":..}]}`
/// to `out_json`; per-document errors still return `SB_STATUS_OK`.
///
/// # Safety
/// `client` must be a live handle; `collection` and `docs_json` must be
/// NUL-terminated strings; `out_json` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sb_client_insert_many(
    client: *mut SbClient,
    collection: *const c_char,
    docs_json: *const c_char,
    out_json: *mut *mut c_char,
) -> SbStatus {
    guard(|| {
        let client = client_arg(client)?;
        let collection = str_arg(collection, "collection")?;
        let docs: Vec<MetricDocument> = serde_json::from_str(str_arg(docs_json, "docs_json")?)?;
        let out = out_arg(out_json, "out_json")?;
        let result = client.inner.insert_many(collection, docs)?;
        *out = into_c_string(serde_json::to_string(&result)?)?;
        Ok(())
    })
}

/// Runs a find and writes the matching documents as a JSON array.
///
/// # Safety
/// As for `sb_client_insert_many`, with `filter_json` a JSON filter object.
#[no_mangle]
pub unsafe extern "C" fn sb_client_find(
    client: *mut SbClient,
    collection: *const c_char,
    filter_json: *const c_char,
    out_json: *mut *mut c_char,
) -> SbStatus {
    guard(|| {
        let client = client_arg(client)?;
        let collection = str_arg(collection, "collection")?;
        let filter: Filter = serde_json::from_str(str_arg(filter_json, "filter_json")?)?;
        let out = out_arg(out_json, "out_json")?;
        let docs = client.inner.find(collection, &filter)?;
        *out = into_c_string(serde_json::to_string(&docs)?)?;
        Ok(())
    })
}

/// Counts the documents matching a JSON filter without copying them out.
///
/// # Safety
/// `client` must be a live handle; string arguments NUL-terminated;
/// `out_count` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sb_client_find_count(
    client: *mut SbClient,
    collection: *const c_char,
    filter_json: *const c_char,
    out_count: *mut u64,
) -> SbStatus {
    guard(|| {
        let client = client_arg(client)?;
        let collection = str_arg(collection, "collection")?;
        let filter: Filter = serde_json::from_str(str_arg(filter_json, "filter_json")?)?;
        let out = out_arg(out_count, "out_count")?;
        *out = client.inner.find_count(collection, &filter)?;
        Ok(())
    })
}
