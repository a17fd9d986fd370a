//! Workload generation and the ingest, query and scaling benchmarks.
//!
//! All cluster traffic goes through router endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::METRICS_COLLECTION;
use crate::model::{DocIdGenerator, JobRecord, MetricDocument};
use crate::orchestrator::{desk_assignment, ClusterHandle, LaunchOptions};
use crate::router::RouterClient;

/// 2018-01-01T00:00:00Z, the start of the job-selection window.
pub const WINDOW_START: i64 = 1_514_764_800;
pub const MINUTES_PER_DAY: i64 = 1440;
pub const DEFAULT_METRICS: usize = 75;
pub const DEFAULT_BATCH_SIZE: usize = 1000;
pub const DEFAULT_PE_PER_NODE: usize = 4;
pub const MAX_JOB_NODES: usize = 64;
pub const MIN_JOB_MINUTES: u32 = 10;
pub const MAX_JOB_MINUTES: u32 = 2880;
pub const CSV_CLIENT_ID: u32 = 0x0000_0c5f;
const CLIENT_TIMEOUT: Duration = Duration::from_secs(60);

/// Days of data ingested for a cluster of `n` nodes; `override_days`
/// stands in for sizes outside the published schedule.
pub fn days_for_nodes(n: usize, override_days: Option<u32>) -> Result<u32> {
    if let Some(d) = override_days {
        return Ok(d);
    }
    match n {
        32 => Ok(3),
        64 => Ok(7),
        128 | 256 => Ok(14),
        other => Err(Error::InvalidArgument(format!(
            "no data schedule for {other} nodes; pass an explicit day count"
        ))),
    }
}

/// Synthetic node names `nid00000`, `nid00001`, ...
pub fn node_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("nid{i:05}")).collect()
}

pub fn metric_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("metric_{i:02}")).collect()
}

fn client_id_for_seed(seed: u64) -> u32 {
    (seed ^ (seed >> 32)) as u32
}

/// Deterministic per-minute metric samples, minute-major: every node's
/// sample for minute 0, then minute 1, and so on.
#[derive(Debug, Clone)]
pub struct MetricStream {
    nodes: Vec<String>,
    names: Vec<String>,
    start: i64,
    total: u64,
    emitted: u64,
    rng: ChaCha8Rng,
    ids: DocIdGenerator,
}

impl MetricStream {
    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

impl Iterator for MetricStream {
    type Item = MetricDocument;

    fn next(&mut self) -> Option<MetricDocument> {
        if self.emitted == self.total {
            return None;
        }
        let n = self.nodes.len() as u64;
        let minute = (self.emitted / n) as i64;
        let node = &self.nodes[(self.emitted % n) as usize];
        self.emitted += 1;
        let metrics = self
            .names
            .iter()
            .map(|name| (name.clone(), (self.rng.gen::<f64>() * 1e4).round() / 100.0))
            .collect();
        Some(MetricDocument {
            doc_id: self.ids.next_id(),
            node_id: node.clone(),
            timestamp: self.start + 60 * minute,
            metrics,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.total - self.emitted) as usize;
        (left, Some(left))
    }
}

/// One document per node per minute over `days` days from `start`.
pub fn generate_metrics(
    node_ids: &[String],
    start: i64,
    days: u32,
    n_metrics: usize,
    seed: u64,
) -> Result<MetricStream> {
    if days == 0 {
        return Err(Error::InvalidArgument("days must be at least 1".into()));
    }
    if start % 60 != 0 {
        return Err(Error::InvalidArgument(format!("start {start} is not minute-aligned")));
    }
    if n_metrics == 0 {
        return Err(Error::InvalidArgument("documents need at least one metric".into()));
    }
    Ok(MetricStream {
        nodes: node_ids.to_vec(),
        names: metric_names(n_metrics),
        start,
        total: node_ids.len() as u64 * u64::from(days) * MINUTES_PER_DAY as u64,
        emitted: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        ids: DocIdGenerator::new(client_id_for_seed(seed)),
    })
}

#[derive(Debug, Clone, Default)]
pub struct CsvLoad {
    pub docs: Vec<MetricDocument>,
    /// Data rows that could not be parsed.
    pub skipped: usize,
}

/// Reads `timestamp,node_id,<metric...>` rows. Blank metric cells are left
/// out of the document.
pub fn load_metrics_csv(path: &Path) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing {name} column", path.display())))
    };
    let ts_col = col("timestamp")?;
    let node_col = col("node_id")?;
    let metric_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ts_col && *i != node_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut ids = DocIdGenerator::new(CSV_CLIENT_ID);
    let mut out = CsvLoad::default();
    for record in reader.records() {
        let parsed = record.ok().and_then(|r| {
            if r.len() != headers.len() {
                return None;
            }
            let timestamp: i64 = r.get(ts_col)?.parse().ok()?;
            let node_id = r.get(node_col)?;
            if node_id.is_empty() || timestamp < 0 {
                return None;
            }
            let mut metrics = BTreeMap::new();
            for (i, name) in &metric_cols {
                let cell = r.get(*i)?;
                if !cell.is_empty() {
                    metrics.insert(name.clone(), cell.parse::<f64>().ok()?);
                }
            }
            (!metrics.is_empty()).then(|| (node_id.to_string(), timestamp, metrics))
        });
        match parsed {
            Some((node_id, timestamp, metrics)) => out.docs.push(MetricDocument {
                doc_id: ids.next_id(),
                node_id,
                timestamp,
                metrics,
            }),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Writes documents in the format [`load_metrics_csv`] reads.
pub fn write_metrics_csv<W: Write>(out: W, names: &[String], docs: impl Iterator<Item = MetricDocument>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["timestamp".to_string(), "node_id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for d in docs {
        let mut row = vec![d.timestamp.to_string(), d.node_id];
        row.extend(
            names
                .iter()
                .map(|n| d.metrics.get(n).map(f64::to_string).unwrap_or_default()),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Synthetic user jobs over `all_nodes` inside
/// `[window_start, window_start + window_days days)`.
pub fn generate_jobs(
    n_jobs: usize,
    all_nodes: &[String],
    window_start: i64,
    window_days: u32,
    seed: u64,
) -> Result<Vec<JobRecord>> {
    if all_nodes.is_empty() || window_days == 0 {
        return Err(Error::InvalidArgument("jobs need at least one node and one day".into()));
    }
    if window_start % 60 != 0 {
        return Err(Error::InvalidArgument(format!(
            "window start {window_start} is not minute-aligned"
        )));
    }
    let window_minutes = i64::from(window_days) * MINUTES_PER_DAY;
    let max_nodes = all_nodes.len().min(MAX_JOB_NODES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs = (0..n_jobs)
        .map(|i| {
            let size = rng.gen_range(1..=max_nodes);
            let node_ids: BTreeSet<String> = sample(&mut rng, all_nodes.len(), size)
                .into_iter()
                .map(|k| all_nodes[k].clone())
                .collect();
            let start_minute = rng.gen_range(0..window_minutes);
            let duration: u32 = rng.gen_range(MIN_JOB_MINUTES..=MAX_JOB_MINUTES);
            let room = (window_minutes - start_minute) as u32;
            JobRecord {
                job_id: format!("job-{i:05}"),
                node_ids,
                start: window_start + 60 * start_minute,
                duration_minutes: duration.min(room),
            }
        })
        .collect();
    Ok(jobs)
}

#[derive(Debug, Clone)]
pub struct IngestPlan {
    pub node_count: usize,
    pub days: u32,
    pub client_hosts: Vec<String>,
    pub pe_per_node: usize,
    pub batch_size: usize,
    pub routers: Vec<String>,
}

impl IngestPlan {
    pub fn new(routers: Vec<String>, client_hosts: Vec<String>) -> Self {
        IngestPlan {
            node_count: 0,
            days: 0,
            client_hosts,
            pe_per_node: DEFAULT_PE_PER_NODE,
            batch_size: DEFAULT_BATCH_SIZE,
            routers,
        }
    }

    pub fn streams(&self) -> usize {
        self.client_hosts.len() * self.pe_per_node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFlag {
    Ok,
    /// Fewer documents than the job implies: the window is not fully ingested.
    CoverageGap,
    /// More documents than the job implies.
    Excess,
    Partial,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub job_id: String,
    pub expected_docs: u64,
    pub returned_docs: u64,
    pub seconds: f64,
    pub flag: RowFlag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_label: String,
    /// Documents submitted (ingest) or jobs queried.
    pub submitted: u64,
    /// Acknowledged inserts (ingest) or documents returned (query).
    pub total_docs: u64,
    pub wall_seconds: f64,
    pub docs_per_second: f64,
    /// Acknowledged inserts per ingest stream.
    pub per_stream: Vec<u64>,
    pub queries: Vec<QueryRow>,
    /// Error counts by error code.
    pub errors: BTreeMap<String, u64>,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

impl BenchReport {
    fn finish(&mut self, started: Instant) {
        self.wall_seconds = started.elapsed().as_secs_f64();
        self.docs_per_second = rate(self.total_docs, self.wall_seconds);
    }

    pub fn error_total(&self) -> u64 {
        self.errors.values().sum()
    }

    pub fn duplicate_errors(&self) -> u64 {
        self.errors.get(crate::model::DUPLICATE_KEY).copied().unwrap_or(0)
    }

    /// Query latency percentile (nearest rank), `q` in [0, 1].
    pub fn latency_percentile(&self, q: f64) -> Option<f64> {
        let mut s: Vec<f64> = self.queries.iter().map(|r| r.seconds).collect();
        if s.is_empty() {
            return None;
        }
        s.sort_by(f64::total_cmp);
        let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
        Some(s[rank - 1])
    }
}

fn rate(docs: u64, seconds: f64) -> f64 {
    if seconds > 0.0 {
        docs as f64 / seconds
    } else {
        0.0
    }
}

struct StreamOutcome {
    inserted: u64,
    submitted: u64,
    errors: BTreeMap<String, u64>,
    abort: Option<String>,
}

/// Drives `source` into the cluster from `plan.streams()` concurrent
/// streams, each bound round-robin to one router.
pub fn run_ingest<I>(plan: &IngestPlan, source: I) -> Result<BenchReport>
where
    I: Iterator<Item = MetricDocument> + Send,
{
    if plan.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if plan.routers.is_empty() {
        return Err(Error::InvalidArgument("no router endpoints".into()));
    }
    let streams = plan.streams();
    if streams == 0 {
        return Err(Error::InvalidArgument("ingest needs at least one stream".into()));
    }
    let source = Mutex::new(source.fuse());
    let stop = std::sync::atomic::AtomicBool::new(false);
    let started = Instant::now();
    let outcomes: Vec<StreamOutcome> = thread::scope(|s| {
        let handles: Vec<_> = (0..streams)
            .map(|i| {
                let router = &plan.routers[i % plan.routers.len()];
                let (source, stop) = (&source, &stop);
                s.spawn(move || ingest_stream(router, plan.batch_size, source, stop))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ingest stream")).collect()
    });
    let mut report = BenchReport {
        config_label: format!("ingest-{streams}x{}", plan.batch_size),
        ..Default::default()
    };
    for o in outcomes {
        report.total_docs += o.inserted;
        report.submitted += o.submitted;
        report.per_stream.push(o.inserted);
        for (k, v) in o.errors {
            *report.errors.entry(k).or_default() += v;
        }
        if report.aborted.is_none() {
            report.aborted = o.abort;
        }
    }
    report.finish(started);
    Ok(report)
}

fn ingest_stream<I: Iterator<Item = MetricDocument>>(
    router: &str,
    batch_size: usize,
    source: &Mutex<I>,
    stop: &std::sync::atomic::AtomicBool,
) -> StreamOutcome {
    let mut out = StreamOutcome {
        inserted: 0,
        submitted: 0,
        errors: BTreeMap::new(),
        abort: None,
    };
    let mut client = match RouterClient::connect(router, CLIENT_TIMEOUT) {
        Ok(c) => c,
        Err(e) => {
            *out.errors.entry(e.code().to_string()).or_default() += 1;
            out.abort = Some(format!("router {router}: {e}"));
            return out;
        }
    };
    while !stop.load(Ordering::Relaxed) {
        let batch: Vec<MetricDocument> = source.lock().unwrap().by_ref().take(batch_size).collect();
        if batch.is_empty() {
            break;
        }
        let n = batch.len() as u64;
        out.submitted += n;
        match client.insert_many(METRICS_COLLECTION, batch) {
            Ok(r) => {
                out.inserted += r.inserted_count;
                for e in r.errors {
                    *out.errors.entry(e.code).or_default() += 1;
                }
            }
            Err(e) => {
                *out.errors.entry(e.code().to_string()).or_default() += n;
                if matches!(e, Error::ClusterUnavailable(_) | Error::NodeDown(_) | Error::Timeout(_)) {
                    stop.store(true, Ordering::Relaxed);
                    out.abort = Some(format!("router {router}: {e}"));
                }
            }
        }
    }
    out
}

/// Runs one conditional find per job with `concurrency` parallel clients.
pub fn run_query_bench(jobs: &[JobRecord], routers: &[String], concurrency: usize) -> Result<BenchReport> {
    if concurrency == 0 {
        return Err(Error::InvalidArgument("concurrency must be at least 1".into()));
    }
    if routers.is_empty() {
        return Err(Error::InvalidArgument("no router endpoints".into()));
    }
    let next = AtomicUsize::new(0);
    let started = Instant::now();
    let mut rows: Vec<(usize, QueryRow)> = thread::scope(|s| {
        let handles: Vec<_> = (0..concurrency.min(jobs.len().max(1)))
            .map(|w| {
                let router = &routers[w % routers.len()];
                let next = &next;
                s.spawn(move || {
                    let mut client = RouterClient::connect(router, CLIENT_TIMEOUT);
                    let mut rows = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(job) = jobs.get(i) else { break };
                        rows.push((i, query_job(&mut client, router, job)));
                    }
                    rows
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("query worker"))
            .collect()
    });
    rows.sort_by_key(|(i, _)| *i);
    let mut report = BenchReport {
        config_label: format!("query-c{concurrency}"),
        submitted: jobs.len() as u64,
        ..Default::default()
    };
    for (_, row) in rows {
        report.total_docs += row.returned_docs;
        match row.flag {
            RowFlag::Ok => {}
            RowFlag::CoverageGap => *report.errors.entry("coverage_gap".into()).or_default() += 1,
            RowFlag::Excess => *report.errors.entry("excess".into()).or_default() += 1,
            RowFlag::Partial => *report.errors.entry("partial_results".into()).or_default() += 1,
            RowFlag::Error => *report.errors.entry("query_error".into()).or_default() += 1,
        }
        report.queries.push(row);
    }
    report.finish(started);
    Ok(report)
}

fn query_job(client: &mut Result<RouterClient>, router: &str, job: &JobRecord) -> QueryRow {
    let expected = job.expected_docs();
    let started = Instant::now();
    if client.is_err() {
        *client = RouterClient::connect(router, CLIENT_TIMEOUT);
    }
    let outcome = match client {
        Ok(c) => c.find_count(METRICS_COLLECTION, &job.filter()),
        Err(e) => Err(Error::NodeDown(format!("router {router}: {e}"))),
    };
    let seconds = started.elapsed().as_secs_f64();
    let (returned, flag, error) = match outcome {
        Ok(n) if n == expected => (n, RowFlag::Ok, None),
        Ok(n) if n < expected => (n, RowFlag::CoverageGap, None),
        Ok(n) => (n, RowFlag::Excess, None),
        Err(e @ Error::PartialResults { .. }) => (0, RowFlag::Partial, Some(e.to_string())),
        Err(e) => {
            if matches!(e, Error::NodeDown(_) | Error::Timeout(_) | Error::Protocol(_)) {
                // the connection may be unusable; reconnect for the next job
                *client = Err(Error::NodeDown(e.to_string()));
            }
            (0, RowFlag::Error, Some(e.to_string()))
        }
    };
    QueryRow {
        job_id: job.job_id.clone(),
        expected_docs: expected,
        returned_docs: returned,
        seconds,
        flag,
        error,
    }
}

pub const QUERY_CSV_HEADER: &str = "job_id,expected_docs,returned_docs,seconds,flag";

pub fn write_query_rows<W: Write>(mut out: W, rows: &[QueryRow]) -> Result<()> {
    writeln!(out, "{QUERY_CSV_HEADER}")?;
    for r in rows {
        let flag = serde_json::to_value(r.flag).expect("flag serializes");
        writeln!(
            out,
            "{},{},{},{},{}",
            r.job_id,
            r.expected_docs,
            r.returned_docs,
            r.seconds,
            flag.as_str().unwrap_or_default()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepConfig {
    pub shards: usize,
    pub routers: usize,
    pub streams: usize,
}

impl SweepConfig {
    /// `shards` shard/router pairs with four streams per pair.
    pub fn pairs(shards: usize) -> Self {
        SweepConfig {
            shards,
            routers: shards,
            streams: DEFAULT_PE_PER_NODE * shards,
        }
    }

    pub fn label(&self) -> String {
        format!("s{}-r{}-c{}", self.shards, self.routers, self.streams)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub launch: LaunchOptions,
    /// Metric nodes per shard; data volume grows with the shard count.
    pub nodes_per_shard: usize,
    pub days: u32,
    pub n_metrics: usize,
    pub batch_size: usize,
    pub jobs: usize,
    pub concurrency: usize,
    pub seed: u64,
    /// Delete each configuration's data directory after its run.
    pub cleanup: bool,
}

impl SweepOptions {
    pub fn new(launch: LaunchOptions) -> Self {
        SweepOptions {
            launch,
            nodes_per_shard: 4,
            days: 1,
            n_metrics: DEFAULT_METRICS,
            batch_size: DEFAULT_BATCH_SIZE,
            jobs: 20,
            concurrency: 4,
            seed: 1,
            cleanup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config: SweepConfig,
    pub total_docs: u64,
    pub ingest_seconds: f64,
    pub docs_per_second: f64,
    pub query_p50_s: Option<f64>,
    pub query_p95_s: Option<f64>,
    pub errors: u64,
    /// Launch or run failure; the row's measurements are then empty.
    pub failed: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str =
    "config,shards,routers,streams,total_docs,ingest_seconds,docs_per_second,query_p50_s,query_p95_s,errors";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        let c = &self.config;
        if self.failed.is_some() {
            return format!("{},{},{},{},0,,,,,failed", c.label(), c.shards, c.routers, c.streams);
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            c.label(),
            c.shards,
            c.routers,
            c.streams,
            self.total_docs,
            self.ingest_seconds,
            self.docs_per_second,
            opt(self.query_p50_s),
            opt(self.query_p95_s),
            self.errors
        )
    }
}

fn sweep_one(cfg: SweepConfig, opts: &SweepOptions, data_root: PathBuf) -> Result<SweepRow> {
    let clients = cfg.streams.div_ceil(DEFAULT_PE_PER_NODE).max(1);
    let mut launch = opts.launch.clone();
    launch.data_root = data_root;
    let mut cluster = ClusterHandle::launch(desk_assignment(cfg.shards, cfg.routers, clients), &launch)?;
    let outcome = (|| {
        let nodes = node_names(opts.nodes_per_shard * cfg.shards);
        let mut plan = IngestPlan::new(cluster.router_endpoints(), cluster.assignment.client_nodes.clone());
        plan.node_count = nodes.len();
        plan.days = opts.days;
        plan.batch_size = opts.batch_size;
        plan.pe_per_node = cfg.streams.div_ceil(clients);
        let source = generate_metrics(&nodes, WINDOW_START, opts.days, opts.n_metrics, opts.seed)?;
        let ingest = run_ingest(&plan, source)?;
        if let Some(reason) = &ingest.aborted {
            return Err(Error::ClusterUnavailable(reason.clone()));
        }
        let jobs = generate_jobs(opts.jobs, &nodes, WINDOW_START, opts.days, opts.seed)?;
        let query = run_query_bench(&jobs, &plan.routers, opts.concurrency)?;
        Ok(SweepRow {
            config: SweepConfig {
                streams: plan.streams(),
                ..cfg
            },
            total_docs: ingest.total_docs,
            ingest_seconds: ingest.wall_seconds,
            docs_per_second: ingest.docs_per_second,
            query_p50_s: query.latency_percentile(0.5),
            query_p95_s: query.latency_percentile(0.95),
            errors: ingest.error_total() + query.error_total(),
            failed: None,
        })
    })();
    let report = cluster.shutdown()?;
    if !report.force_killed().is_empty() {
        log::warn!("{}: force-killed {:?}", cfg.label(), report.force_killed());
    }
    outcome
}

/// Launches, measures and tears down each configuration in turn, writing
/// one CSV row per configuration to `out`.
pub fn scaling_sweep(configs: &[SweepConfig], opts: &SweepOptions, out: &Path) -> Result<Vec<SweepRow>> {
    let mut file = fs::File::create(out)?;
    writeln!(file, "{SWEEP_CSV_HEADER}")?;
    let mut rows = Vec::new();
    for cfg in configs {
        let dir = opts
            .launch
            .data_root
            .join(format!("sweep-{}-{}", cfg.label(), std::process::id()));
        log::info!("sweep: {} in {}", cfg.label(), dir.display());
        let row = sweep_one(*cfg, opts, dir.clone()).unwrap_or_else(|e| {
            log::error!("sweep: {} failed: {e}", cfg.label());
            SweepRow {
                config: *cfg,
                total_docs: 0,
                ingest_seconds: 0.0,
                docs_per_second: 0.0,
                query_p50_s: None,
                query_p95_s: None,
                errors: 0,
                failed: Some(e.to_string()),
            }
        });
        writeln!(file, "{}", row.to_csv())?;
        file.flush()?;
        if opts.cleanup {
            if let Err(e) = fs::remove_dir_all(&dir) {
                log::warn!("could not remove {}: {e}", dir.display());
            }
        }
        rows.push(row);
    }
    Ok(rows)
}
