use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use libc::c_char;
use shardbatch::bench;
use shardbatch::local::{LocalCluster, METRICS_COLLECTION};
use shardbatch::model::{Filter, InsertManyResult, MetricDocument};
use shardbatch::RoleAssignment;
use shardbatch_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

/// Takes ownership of a returned string.
fn take(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { sb_string_free(p) };
    s
}

fn last_error() -> String {
    let p = sb_last_error();
    assert!(!p.is_null(), "no error recorded");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn start_cluster(dir: &Path) -> LocalCluster {
    LocalCluster::start(dir, Default::default()).unwrap()
}

#[test]
fn topology_helpers() {
    let mut days = 0u32;
    for (n, want) in [(32, 3), (64, 7), (128, 14), (256, 14)] {
        assert_eq!(unsafe { sb_days_for_nodes(n, &mut days) }, SbStatus::Ok);
        assert_eq!(days, want);
    }
    assert!(sb_last_error().is_null());
    assert_eq!(
        unsafe { sb_days_for_nodes(32, ptr::null_mut()) },
        SbStatus::InvalidArgument
    );
    assert!(last_error().contains("out_days"));

    let text = c(&(0..32).map(|i| format!("nid{i:05}\n")).collect::<String>());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { sb_assign_roles(text.as_ptr(), true, &mut out) }, SbStatus::Ok);
    let roles: RoleAssignment = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(roles.counts(), (2, 7, 7, 16));

    let few = c("a\nb\nc\n");
    assert_eq!(
        unsafe { sb_assign_roles(few.as_ptr(), true, &mut out) },
        SbStatus::InvalidArgument
    );
    assert!(last_error().contains("too few nodes"));
    let odd = c(&(0..10).map(|i| format!("h{i}\n")).collect::<String>());
    assert_eq!(
        unsafe { sb_assign_roles(odd.as_ptr(), true, &mut out) },
        SbStatus::InvalidArgument
    );
    assert_eq!(unsafe { sb_assign_roles(odd.as_ptr(), false, &mut out) }, SbStatus::Ok);
    take(out);
}

#[test]
fn client_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = start_cluster(dir.path());
    let endpoint = c(&cluster.router_endpoints()[0]);
    let collection = c(METRICS_COLLECTION);

    let mut client = ptr::null_mut();
    assert_eq!(
        unsafe { sb_client_connect(endpoint.as_ptr(), 5000, &mut client) },
        SbStatus::Ok
    );
    assert_eq!(unsafe { sb_client_ping(client) }, SbStatus::Ok);

    let mut docs: Vec<MetricDocument> = bench::generate_metrics(&bench::node_names(2), bench::WINDOW_START, 1, 3, 1)
        .unwrap()
        .take(300)
        .collect();
    docs.push(docs[10].clone());
    let json = c(&serde_json::to_string(&docs).unwrap());
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { sb_client_insert_many(client, collection.as_ptr(), json.as_ptr(), &mut out) },
        SbStatus::Ok
    );
    let result: InsertManyResult = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(result.inserted_count, 300);
    assert_eq!(result.errors.len(), 1);
    assert_eq!(result.errors[0].batch_index, 300);

    let f = Filter::nodes_and_time(["nid00001"], bench::WINDOW_START, bench::WINDOW_START + 3600);
    let fjson = c(&serde_json::to_string(&f).unwrap());
    assert_eq!(
        unsafe { sb_client_find(client, collection.as_ptr(), fjson.as_ptr(), &mut out) },
        SbStatus::Ok
    );
    let mut found: Vec<MetricDocument> = serde_json::from_str(&take(out)).unwrap();
    found.sort_by_key(|d| d.timestamp);
    let want: Vec<MetricDocument> = docs[..300]
        .iter()
        .filter(|d| d.node_id == "nid00001" && d.timestamp < f.ts_hi.unwrap())
        .cloned()
        .collect();
    assert_eq!(found, want);

    let mut count = 0u64;
    assert_eq!(
        unsafe { sb_client_find_count(client, collection.as_ptr(), fjson.as_ptr(), &mut count) },
        SbStatus::Ok
    );
    assert_eq!(count, want.len() as u64);

    let empty = c(r#"{"ts_lo":10,"ts_hi":10}"#);
    assert_eq!(
        unsafe { sb_client_find_count(client, collection.as_ptr(), empty.as_ptr(), &mut count) },
        SbStatus::MalformedFilter
    );
    let junk = c("{not json");
    assert_eq!(
        unsafe { sb_client_find_count(client, collection.as_ptr(), junk.as_ptr(), &mut count) },
        SbStatus::InvalidArgument
    );
    assert!(last_error().contains("invalid JSON"));
    let missing = c("no_such_collection");
    assert_eq!(
        unsafe { sb_client_find_count(client, missing.as_ptr(), fjson.as_ptr(), &mut count) },
        SbStatus::NotFound
    );
    assert_eq!(unsafe { sb_client_ping(ptr::null_mut()) }, SbStatus::InvalidArgument);

    unsafe { sb_client_free(client) };
    unsafe { sb_client_free(ptr::null_mut()) };
    unsafe { sb_string_free(ptr::null_mut()) };
    cluster.stop().unwrap();
}

#[test]
fn connect_failures() {
    let mut client = ptr::null_mut();
    let nobody = c("127.0.0.1:1");
    let status = unsafe { sb_client_connect(nobody.as_ptr(), 500, &mut client) };
    assert_eq!(status, SbStatus::Transport, "{}", last_error());
    assert!(client.is_null());
    assert_eq!(
        unsafe { sb_client_connect(nobody.as_ptr(), 0, &mut client) },
        SbStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { sb_client_connect(ptr::null(), 500, &mut client) },
        SbStatus::InvalidArgument
    );
    let bad_utf8 = CString::new(vec![0xff, 0xfe]).unwrap();
    assert_eq!(
        unsafe { sb_client_connect(bad_utf8.as_ptr(), 500, &mut client) },
        SbStatus::InvalidArgument
    );
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/shardbatch.h")).unwrap();
    for name in [
        "sb_last_error",
        "sb_string_free",
        "sb_days_for_nodes",
        "sb_assign_roles",
        "sb_client_connect",
        "sb_client_free",
        "sb_client_ping",
        "sb_client_insert_many",
        "sb_client_find",
        "sb_client_find_count",
        "typedef struct SbClient SbClient",
        "SB_STATUS_PARTIAL_RESULTS = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

fn static_lib() -> Option<PathBuf> {
    // CARGO_TARGET_TMPDIR is <target>/tmp; the library sits in the profile dir
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent()?;
    let profile_dir = std::env::current_exe().ok()?.parent()?.parent()?.to_path_buf();
    [profile_dir, target.join("debug")]
        .into_iter()
        .map(|d| d.join("libshardbatch_ffi.a"))
        .find(|p| p.exists())
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        eprintln!("skipping: libshardbatch_ffi.a not found");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let build = Command::new("cc")
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));

    let cluster = start_cluster(&dir.path().join("data"));
    let run = Command::new(&exe).arg(&cluster.router_endpoints()[0]).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout).into_owned();
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    cluster.stop().unwrap();

    let lines: Vec<&str> = stdout.lines().collect();
    let insert: InsertManyResult = serde_json::from_str(lines[0].strip_prefix("insert ").unwrap()).unwrap();
    assert_eq!(insert.inserted_count, 2);
    assert_eq!(insert.errors.len(), 1);
    assert_eq!(insert.errors[0].batch_index, 2);
    assert_eq!(lines[1], "count 2");
    assert_eq!(lines[2], format!("empty range {}", SbStatus::MalformedFilter as i32));
}
