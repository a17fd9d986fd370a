//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::bench::{self, IngestPlan, SweepConfig, SweepOptions, WINDOW_START};
use crate::model::JobRecord;
use crate::orchestrator::{assign_roles, ClusterHandle, ExitStatus, LaunchOptions, NodeFile, ROUTERS_ENV};
use crate::worker::{self, Role, WorkerArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "shardbatch",
    version,
    about = "Sharded metric store as a batch job, with benchmark tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign roles from a nodefile, start the cluster and publish router endpoints.
    Launch(LaunchArgs),
    /// Stop a launched cluster (routers, then shards, then config).
    Shutdown(ClusterArgs),
    /// Report liveness of every worker of a launched cluster.
    Status(ClusterArgs),
    /// Ingest generated or CSV metric data through the routers.
    Ingest(IngestArgs),
    /// Run the job query benchmark through the routers.
    Query(QueryArgs),
    /// Launch, measure and tear down a series of cluster sizes.
    Sweep(SweepArgs),
    /// Write synthetic metric samples as CSV.
    GenData(GenDataArgs),
    /// Write synthetic job records as JSON lines.
    GenJobs(GenJobsArgs),
    #[command(hide = true)]
    Worker(WorkerCli),
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Flat key=value file (base_port, data_root, split_threshold, startup_timeout_s, cluster_token).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    base_port: Option<u16>,
    #[arg(long)]
    split_threshold: Option<u64>,
    #[arg(long)]
    startup_timeout_s: Option<u64>,
    #[arg(long)]
    cluster_token: Option<String>,
    /// Seconds a worker may take to stop before it is killed.
    #[arg(long, default_value_t = 10)]
    grace_s: u64,
}

impl ClusterArgs {
    fn launch_options(&self) -> anyhow::Result<LaunchOptions> {
        let mut opts = LaunchOptions::new("shardbatch-data");
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            opts.apply_config_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        if let Some(v) = &self.data_root {
            opts.data_root = v.clone();
        }
        if let Some(v) = self.base_port {
            opts.base_port = v;
        }
        if let Some(v) = self.split_threshold {
            opts.split_threshold = v;
        }
        if let Some(v) = self.startup_timeout_s {
            opts.startup_timeout = Duration::from_secs(v);
        }
        if let Some(v) = &self.cluster_token {
            opts.cluster_token = v.clone();
        }
        opts.shutdown_grace = Duration::from_secs(self.grace_s);
        Ok(opts)
    }
}

#[derive(Debug, Args)]
struct LaunchArgs {
    #[arg(long)]
    nodefile: PathBuf,
    /// Where to write the router endpoints; defaults to <data_root>/routers.txt.
    #[arg(long)]
    endpoints_out: Option<PathBuf>,
    /// Accept host counts that are not a multiple of four.
    #[arg(long)]
    permissive: bool,
    #[command(flatten)]
    cluster: ClusterArgs,
}

#[derive(Debug, Args)]
struct RouterArgs {
    /// Endpoints file written by `launch`; SHARDBATCH_ROUTERS is used when absent.
    #[arg(long)]
    routers_file: Option<PathBuf>,
}

impl RouterArgs {
    fn endpoints(&self) -> anyhow::Result<Vec<String>> {
        let list = match &self.routers_file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect()
            }
            None => match std::env::var(ROUTERS_ENV) {
                Ok(v) => v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
                Err(_) => Vec::new(),
            },
        };
        if list.is_empty() {
            return Err(usage(format!("no routers: pass --routers-file or set {ROUTERS_ENV}")));
        }
        Ok(list)
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Number of metric-producing nodes.
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    /// Days of data; defaults to the schedule for --nodes when it has one.
    #[arg(long)]
    days: Option<u32>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl DataArgs {
    fn days(&self) -> anyhow::Result<u32> {
        if self.days == Some(0) {
            return Err(usage("--days must be at least 1".into()));
        }
        bench::days_for_nodes(self.nodes, self.days).map_err(|e| usage(format!("{e} (use --days)")))
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    routers: RouterArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = bench::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Client hosts driving the ingest.
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = bench::DEFAULT_PE_PER_NODE)]
    pe_per_node: usize,
    #[arg(long, default_value_t = bench::DEFAULT_METRICS)]
    metrics: usize,
    /// Ingest this CSV file instead of generated data.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[command(flatten)]
    routers: RouterArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 50)]
    jobs: usize,
    /// Read jobs written by `gen-jobs` instead of generating them.
    #[arg(long)]
    jobs_file: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    concurrency: usize,
    /// Write per-job rows as CSV here.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Comma-separated shard counts (each with as many routers and four
    /// streams per shard), or shards:routers:streams triples.
    #[arg(long, default_value = "1,2,4")]
    configs: String,
    #[arg(long, default_value = "sweep.csv")]
    report_out: PathBuf,
    /// Metric nodes per shard.
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    days: u32,
    #[arg(long, default_value_t = bench::DEFAULT_METRICS)]
    metrics: usize,
    #[arg(long, default_value_t = 20)]
    jobs: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = bench::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Keep each configuration's data directory.
    #[arg(long)]
    keep_data: bool,
    #[command(flatten)]
    cluster: ClusterArgs,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = bench::DEFAULT_METRICS)]
    metrics: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenJobsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 50)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WorkerCli {
    #[arg(long)]
    role: Role,
    #[arg(long)]
    id: String,
    #[arg(long)]
    listen: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "")]
    token: String,
    #[arg(long = "config-endpoint")]
    config_endpoints: Vec<String>,
    #[arg(long)]
    mirror: Option<String>,
    #[arg(long, default_value_t = crate::shard::DEFAULT_SPLIT_THRESHOLD)]
    split_threshold: u64,
    #[arg(long)]
    hang_on_shutdown: bool,
}

impl clap::ValueEnum for Role {
    fn value_variants<'a>() -> &'a [Self] {
        &[Role::Config, Role::Shard, Role::Router]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

/// Marks an error as a usage error (exit 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: String) -> anyhow::Error {
    anyhow::Error::new(Usage(msg))
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Launch(a) => launch(a),
        Command::Shutdown(a) => shutdown(a),
        Command::Status(a) => status(a),
        Command::Ingest(a) => ingest(a),
        Command::Query(a) => query(a),
        Command::Sweep(a) => sweep(a),
        Command::GenData(a) => gen_data(a),
        Command::GenJobs(a) => gen_jobs(a),
        Command::Worker(a) => {
            let mut args = WorkerArgs::new(a.role, a.id, a.listen, a.token);
            args.data_dir = a.data_dir;
            args.config_endpoints = a.config_endpoints;
            args.mirror = a.mirror;
            args.split_threshold = a.split_threshold;
            args.hang_on_shutdown = a.hang_on_shutdown;
            Ok(worker::run(args)?)
        }
    }
}

fn launch(a: LaunchArgs) -> anyhow::Result<()> {
    let opts = a.cluster.launch_options()?;
    let nodes = NodeFile::read(&a.nodefile)?;
    let assignment = assign_roles(&nodes.hostnames, !a.permissive)?;
    let (c, s, r, k) = assignment.counts();
    eprintln!("roles: {c} config, {s} shards, {r} routers, {k} clients");
    let mut cluster = ClusterHandle::launch(assignment, &opts)?;
    let out = a.endpoints_out.unwrap_or_else(|| opts.data_root.join("routers.txt"));
    cluster.publish_endpoints(&out)?;
    println!("{ROUTERS_ENV}={}", cluster.router_endpoints().join(","));
    eprintln!("endpoints written to {}", out.display());
    cluster.detach();
    Ok(())
}

fn shutdown(a: ClusterArgs) -> anyhow::Result<()> {
    let opts = a.launch_options()?;
    let mut cluster = ClusterHandle::load(&opts.data_root)?;
    cluster.set_shutdown_grace(opts.shutdown_grace);
    let report = cluster.shutdown()?;
    for w in &report.workers {
        let status = match &w.status {
            ExitStatus::Exited(Some(code)) => format!("exited {code}"),
            ExitStatus::Exited(None) => "exited".to_string(),
            ExitStatus::ForceKilled => "force-killed".to_string(),
            ExitStatus::AlreadyStopped => "already stopped".to_string(),
        };
        println!("{}\t{}\tpid {}\t{status}", w.name, w.role, w.pid);
    }
    Ok(())
}

fn status(a: ClusterArgs) -> anyhow::Result<()> {
    let opts = a.launch_options()?;
    let cluster = ClusterHandle::load(&opts.data_root)?;
    let mut down = 0;
    for (w, alive, pong) in cluster.status() {
        let state = match (alive, pong) {
            (true, true) => "up",
            (true, false) => "unresponsive",
            _ => "down",
        };
        if state != "up" {
            down += 1;
        }
        println!("{}\t{}\t{}\tpid {}\t{state}", w.name, w.role, w.endpoint, w.pid);
    }
    if down > 0 {
        bail!("{down} worker(s) not answering");
    }
    Ok(())
}

fn write_json_report(path: &Path, report: &bench::BenchReport) -> anyhow::Result<()> {
    let json = serde_json::to_vec_pretty(report)?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let routers = a.routers.endpoints()?;
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1".into()));
    }
    let mut plan = IngestPlan::new(routers, bench::node_names(a.clients.max(1)));
    plan.batch_size = a.batch_size;
    plan.pe_per_node = a.pe_per_node;
    let report = match &a.csv {
        Some(path) => {
            let load = bench::load_metrics_csv(path)?;
            if load.skipped > 0 {
                eprintln!("skipped {} unparsable rows", load.skipped);
            }
            bench::run_ingest(&plan, load.docs.into_iter())?
        }
        None => {
            let days = a.data.days()?;
            let nodes = bench::node_names(a.data.nodes);
            plan.node_count = nodes.len();
            plan.days = days;
            let source = bench::generate_metrics(&nodes, WINDOW_START, days, a.metrics, a.data.seed)?;
            bench::run_ingest(&plan, source)?
        }
    };
    println!(
        "inserted {} of {} in {:.3}s ({:.1} docs/s), duplicates {}, errors {}",
        report.total_docs,
        report.submitted,
        report.wall_seconds,
        report.docs_per_second,
        report.duplicate_errors(),
        report.error_total()
    );
    if let Some(path) = &a.report_out {
        write_json_report(path, &report)?;
    }
    if let Some(reason) = &report.aborted {
        bail!("ingest aborted: {reason}");
    }
    Ok(())
}

fn read_jobs(path: &Path) -> anyhow::Result<Vec<JobRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn query(a: QueryArgs) -> anyhow::Result<()> {
    let routers = a.routers.endpoints()?;
    if a.concurrency == 0 {
        return Err(usage("--concurrency must be at least 1".into()));
    }
    let jobs = match &a.jobs_file {
        Some(p) => read_jobs(p)?,
        None => {
            let days = a.data.days()?;
            bench::generate_jobs(
                a.jobs,
                &bench::node_names(a.data.nodes),
                WINDOW_START,
                days,
                a.data.seed,
            )?
        }
    };
    let report = bench::run_query_bench(&jobs, &routers, a.concurrency)?;
    let ok = report.queries.iter().filter(|r| r.flag == bench::RowFlag::Ok).count();
    println!(
        "{ok}/{} jobs matched; {} documents in {:.3}s; p50 {:.4}s p95 {:.4}s",
        report.queries.len(),
        report.total_docs,
        report.wall_seconds,
        report.latency_percentile(0.5).unwrap_or(0.0),
        report.latency_percentile(0.95).unwrap_or(0.0)
    );
    if let Some(path) = &a.report_out {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        bench::write_query_rows(BufWriter::new(f), &report.queries)?;
    }
    let failed = report
        .queries
        .iter()
        .filter(|r| {
            matches!(
                r.flag,
                bench::RowFlag::Partial | bench::RowFlag::Error | bench::RowFlag::Excess
            )
        })
        .count();
    if failed > 0 {
        bail!("{failed} queries failed");
    }
    Ok(())
}

fn parse_configs(spec: &str) -> anyhow::Result<Vec<SweepConfig>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let nums: Vec<usize> = item
            .split(':')
            .map(|n| n.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| usage(format!("bad --configs entry {item:?}")))?;
        let cfg = match nums[..] {
            [s] => SweepConfig::pairs(s),
            [s, r, c] => SweepConfig {
                shards: s,
                routers: r,
                streams: c,
            },
            _ => return Err(usage(format!("bad --configs entry {item:?}"))),
        };
        if cfg.shards == 0 || cfg.routers == 0 || cfg.streams == 0 {
            return Err(usage(format!("--configs entry {item:?} has a zero count")));
        }
        out.push(cfg);
    }
    Ok(out)
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let configs = parse_configs(&a.configs)?;
    if a.days == 0 || a.nodes == 0 || a.batch_size == 0 || a.concurrency == 0 {
        return Err(usage(
            "--days, --nodes, --batch-size and --concurrency must be positive".into(),
        ));
    }
    let mut opts = SweepOptions::new(a.cluster.launch_options()?);
    opts.nodes_per_shard = a.nodes;
    opts.days = a.days;
    opts.n_metrics = a.metrics;
    opts.jobs = a.jobs;
    opts.concurrency = a.concurrency;
    opts.batch_size = a.batch_size;
    opts.seed = a.seed;
    opts.cleanup = !a.keep_data;
    fs::create_dir_all(&opts.launch.data_root)?;
    let rows = bench::scaling_sweep(&configs, &opts, &a.report_out)?;
    for r in &rows {
        println!("{}", r.to_csv());
    }
    let failed = rows.iter().filter(|r| r.failed.is_some()).count();
    if failed > 0 {
        bail!("{failed} configuration(s) failed; see {}", a.report_out.display());
    }
    Ok(())
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let days = a.data.days()?;
    if a.metrics == 0 {
        return Err(usage("--metrics must be at least 1".into()));
    }
    let nodes = bench::node_names(a.data.nodes);
    let stream = bench::generate_metrics(&nodes, WINDOW_START, days, a.metrics, a.data.seed)?;
    bench::write_metrics_csv(output(&a.out)?, &bench::metric_names(a.metrics), stream)?;
    Ok(())
}

fn gen_jobs(a: GenJobsArgs) -> anyhow::Result<()> {
    let days = a.data.days()?;
    let jobs = bench::generate_jobs(
        a.jobs,
        &bench::node_names(a.data.nodes),
        WINDOW_START,
        days,
        a.data.seed,
    )?;
    let mut out = output(&a.out)?;
    for j in &jobs {
        serde_json::to_writer(&mut out, j)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
