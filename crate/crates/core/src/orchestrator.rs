//! Batch-job run-script engine: nodefile parsing, role assignment, worker
//! process launch and teardown.
//!
//! Every logical host is emulated on loopback: the host at position `i` of
//! the assignment (config, shards, routers, clients) owns the port block
//! starting at `base_port + 10 * i`.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::{METRICS_COLLECTION, METRICS_INDEXES};
use crate::model::RoleAssignment;
use crate::net::Connection;
use crate::wire::Message;
use crate::worker::Role;

pub const ROUTERS_ENV: &str = "SHARDBATCH_ROUTERS";
pub const LOCK_FILE: &str = "shardbatch.lock";
pub const STATE_FILE: &str = "cluster.json";
pub const DEFAULT_BASE_PORT: u16 = 27100;
pub const PORT_BLOCK: u16 = 10;

/// Unique hosts of a scheduler nodefile, in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeFile {
    pub hostnames: Vec<String>,
}

impl NodeFile {
    pub fn parse(text: &str) -> NodeFile {
        let mut seen = HashSet::new();
        let hostnames = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && seen.insert(l.to_string()))
            .map(String::from)
            .collect();
        NodeFile { hostnames }
    }

    pub fn read(path: &Path) -> Result<NodeFile> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Ok(NodeFile::parse(&text))
    }
}

/// Splits `nodes` into config, shard, router and client hosts.
///
/// Half the hosts are clients; of the other half, two run config servers
/// and the rest is shared between shards and routers (shards take the odd
/// one out, which only happens when `strict` is off).
pub fn assign_roles(nodes: &[String], strict: bool) -> Result<RoleAssignment> {
    let n = nodes.len();
    if n < 8 {
        return Err(Error::TooFewNodes(n));
    }
    if strict && !n.is_multiple_of(4) {
        return Err(Error::InvalidCount(n));
    }
    let servers = n / 2 - 2;
    let shards = servers.div_ceil(2);
    let routers = servers / 2;
    let (config, rest) = nodes.split_at(2);
    let (shard, rest) = rest.split_at(shards);
    let (router, client) = rest.split_at(routers);
    Ok(RoleAssignment {
        config_nodes: config.to_vec(),
        shard_nodes: shard.to_vec(),
        router_nodes: router.to_vec(),
        client_nodes: client.to_vec(),
    })
}

/// Assignment over synthetic host names, for desk-scale runs that pick
/// their shard and router counts directly.
pub fn desk_assignment(shards: usize, routers: usize, clients: usize) -> RoleAssignment {
    let host = |role: &str, i: usize| format!("{role}{i:03}");
    RoleAssignment {
        config_nodes: (0..2).map(|i| host("cfg", i)).collect(),
        shard_nodes: (0..shards).map(|i| host("shd", i)).collect(),
        router_nodes: (0..routers).map(|i| host("rtr", i)).collect(),
        client_nodes: (0..clients).map(|i| host("cli", i)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub base_port: u16,
    pub data_root: PathBuf,
    pub split_threshold: u64,
    pub startup_timeout: Duration,
    pub cluster_token: String,
    pub shutdown_grace: Duration,
    /// Binary providing the `worker` subcommand; defaults to the current executable.
    pub worker_exe: Option<PathBuf>,
    /// Test hook: shards acknowledge `shutdown` but keep running.
    pub hang_on_shutdown: bool,
}

impl LaunchOptions {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        LaunchOptions {
            base_port: DEFAULT_BASE_PORT,
            data_root: data_root.into(),
            split_threshold: crate::shard::DEFAULT_SPLIT_THRESHOLD,
            startup_timeout: Duration::from_secs(30),
            cluster_token: random_token(),
            shutdown_grace: Duration::from_secs(10),
            worker_exe: None,
            hang_on_shutdown: false,
        }
    }

    /// Applies a flat `key=value` config file. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are an error.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Format(format!("{key}: {value:?} is not a valid number")))
        }
        match key {
            "base_port" => self.base_port = num(key, value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "split_threshold" => self.split_threshold = num(key, value)?,
            "startup_timeout_s" => self.startup_timeout = Duration::from_secs(num(key, value)?),
            "cluster_token" => self.cluster_token = value.to_string(),
            other => return Err(Error::Format(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn exe(&self) -> Result<PathBuf> {
        match &self.worker_exe {
            Some(p) => Ok(p.clone()),
            None => Ok(std::env::current_exe()?),
        }
    }
}

fn random_token() -> String {
    hex::encode(rand::random::<[u8; 16]>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterState {
    Launching,
    Ready,
    Draining,
    Stopped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub role: Role,
    pub name: String,
    pub host: String,
    pub endpoint: String,
    pub pid: u32,
    pub data_dir: Option<PathBuf>,
    pub log: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedCluster {
    assignment: RoleAssignment,
    token: String,
    workers: Vec<WorkerInfo>,
    endpoints_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExitStatus {
    Exited(Option<i32>),
    ForceKilled,
    AlreadyStopped,
}

#[derive(Debug, Clone)]
pub struct WorkerExit {
    pub name: String,
    pub role: Role,
    pub pid: u32,
    pub status: ExitStatus,
}

#[derive(Debug, Clone, Default)]
pub struct ExitReport {
    pub workers: Vec<WorkerExit>,
}

impl ExitReport {
    pub fn force_killed(&self) -> Vec<&str> {
        self.workers
            .iter()
            .filter(|w| w.status == ExitStatus::ForceKilled)
            .map(|w| w.name.as_str())
            .collect()
    }
}

/// A launched cluster of worker processes.
pub struct ClusterHandle {
    pub assignment: RoleAssignment,
    pub workers: Vec<WorkerInfo>,
    pub endpoints_file: Option<PathBuf>,
    data_root: PathBuf,
    token: String,
    grace: Duration,
    children: Vec<Option<Child>>,
    state: ClusterState,
}

/// True if `pid` names a running (non-zombie) process.
pub fn pid_alive(pid: u32) -> bool {
    let Ok(pid_t) = libc::pid_t::try_from(pid) else {
        return false;
    };
    // SAFETY: signal 0 performs only the existence and permission check.
    if unsafe { libc::kill(pid_t, 0) } != 0 {
        return io::Error::last_os_error().raw_os_error() == Some(libc::EPERM);
    }
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => stat
            .rsplit_once(')')
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .is_none_or(|state| state != "Z" && state != "X"),
        Err(_) => true,
    }
}

fn kill(pid: u32) {
    if let Ok(p) = libc::pid_t::try_from(pid) {
        // SAFETY: plain kill(2) on a pid we spawned.
        unsafe {
            libc::kill(p, libc::SIGKILL);
        }
    }
}

/// Takes the per-data-root lock, refusing if the recorded pids are alive.
fn acquire_lock(data_root: &Path) -> Result<()> {
    let path = data_root.join(LOCK_FILE);
    if let Ok(text) = fs::read_to_string(&path) {
        let live = text
            .split_whitespace()
            .filter_map(|p| p.parse::<u32>().ok())
            .any(pid_alive);
        if live {
            return Err(Error::Lock(data_root.to_path_buf()));
        }
        log::warn!("removing stale lock {}", path.display());
        fs::remove_file(&path)?;
    }
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
        .map_err(|e| match e.kind() {
            io::ErrorKind::AlreadyExists => Error::Lock(data_root.to_path_buf()),
            _ => Error::Io(e),
        })?;
    writeln!(f, "{}", std::process::id())?;
    Ok(())
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn log_excerpt(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    let tail = &lines[lines.len().saturating_sub(15)..];
    if tail.is_empty() {
        format!("(no output in {})", path.display())
    } else {
        tail.join("\n")
    }
}

fn call(endpoint: &str, token: &str, msg: Message, timeout: Duration) -> Result<Message> {
    Connection::connect(endpoint, token, timeout)?.call(msg)
}

impl ClusterHandle {
    /// Starts config primary, config mirror, shards and routers in that
    /// order, creates the metrics collection, and health-checks everything.
    /// On any failure the workers started so far are killed.
    pub fn launch(assignment: RoleAssignment, opts: &LaunchOptions) -> Result<ClusterHandle> {
        let (configs, shards, routers, _) = assignment.counts();
        if configs != 2 || shards == 0 || routers == 0 {
            return Err(Error::InvalidArgument(format!(
                "assignment needs 2 config hosts and at least one shard and router, got {:?}",
                assignment.counts()
            )));
        }
        fs::create_dir_all(&opts.data_root)?;
        acquire_lock(&opts.data_root)?;
        let mut handle = ClusterHandle {
            assignment,
            workers: Vec::new(),
            endpoints_file: None,
            data_root: opts.data_root.clone(),
            token: opts.cluster_token.clone(),
            grace: opts.shutdown_grace,
            children: Vec::new(),
            state: ClusterState::Launching,
        };
        match handle.start_all(opts) {
            Ok(()) => {
                handle.state = ClusterState::Ready;
                handle.save()?;
                Ok(handle)
            }
            Err(e) => {
                handle.kill_all();
                let _ = fs::remove_file(opts.data_root.join(LOCK_FILE));
                Err(e)
            }
        }
    }

    fn start_all(&mut self, opts: &LaunchOptions) -> Result<()> {
        let exe = opts.exe()?;
        let logs = opts.data_root.join("logs");
        fs::create_dir_all(&logs)?;
        let endpoint_of = |index: usize| -> Result<String> {
            let port = u32::from(opts.base_port) + u32::from(PORT_BLOCK) * index as u32;
            let port =
                u16::try_from(port).map_err(|_| Error::InvalidArgument(format!("port block {index} exceeds 65535")))?;
            Ok(format!("127.0.0.1:{port}"))
        };
        let hosts: Vec<String> = self.assignment.all_hosts().cloned().collect();
        let (_, n_shards, n_routers, _) = self.assignment.counts();
        let primary = endpoint_of(0)?;
        let mirror = endpoint_of(1)?;

        let mut plan: Vec<(Role, String, usize, Option<PathBuf>)> = vec![
            (
                Role::Config,
                "config-0".into(),
                0,
                Some(opts.data_root.join("config-0")),
            ),
            (
                Role::Config,
                "config-1".into(),
                1,
                Some(opts.data_root.join("config-1")),
            ),
        ];
        for i in 0..n_shards {
            plan.push((
                Role::Shard,
                format!("shard-{i}"),
                2 + i,
                Some(opts.data_root.join(format!("shard-{i}"))),
            ));
        }
        for i in 0..n_routers {
            plan.push((Role::Router, format!("router-{i}"), 2 + n_shards + i, None));
        }

        for (role, name, index, data_dir) in plan {
            if role == Role::Router && !self.workers.iter().any(|w| w.role == Role::Router) {
                self.await_registration(n_shards, opts.startup_timeout)?;
                self.create_metrics()?;
            }
            let endpoint = endpoint_of(index)?;
            let log = logs.join(format!("{name}.log"));
            let mut cmd = Command::new(&exe);
            cmd.arg("worker")
                .args(["--role", role.as_str(), "--id", &name, "--listen", &endpoint])
                .args(["--token", &opts.cluster_token])
                .args(["--split-threshold", &opts.split_threshold.to_string()]);
            if let Some(dir) = &data_dir {
                cmd.arg("--data-dir").arg(dir);
            }
            match (role, name.as_str()) {
                (Role::Config, "config-0") => {
                    cmd.args(["--mirror", &mirror]);
                }
                (Role::Config, _) => {}
                _ => {
                    cmd.args(["--config-endpoint", &primary, "--config-endpoint", &mirror]);
                }
            }
            if role == Role::Shard && opts.hang_on_shutdown {
                cmd.arg("--hang-on-shutdown");
            }
            let out = fs::File::create(&log)?;
            let child = cmd
                .stdin(Stdio::null())
                .stdout(out.try_clone()?)
                .stderr(out)
                .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "info".into()))
                .process_group(0)
                .spawn()
                .map_err(|e| Error::LaunchFailed {
                    role: role.to_string(),
                    worker: name.clone(),
                    excerpt: format!("cannot spawn {}: {e}", exe.display()),
                })?;
            log::info!("started {name} (pid {}) on {endpoint}", child.id());
            self.workers.push(WorkerInfo {
                role,
                name,
                host: hosts[index].clone(),
                endpoint,
                pid: child.id(),
                data_dir,
                log,
            });
            self.children.push(Some(child));
            self.write_lock()?;
            self.await_ping(self.workers.len() - 1, opts.startup_timeout)?;
        }
        self.await_registration(n_shards, opts.startup_timeout)
    }

    fn write_lock(&self) -> Result<()> {
        let mut pids = vec![std::process::id().to_string()];
        pids.extend(self.workers.iter().map(|w| w.pid.to_string()));
        write_atomic(&self.data_root.join(LOCK_FILE), (pids.join("\n") + "\n").as_bytes())
    }

    fn launch_failed(&mut self, i: usize, reason: &str) -> Error {
        let w = &self.workers[i];
        Error::LaunchFailed {
            role: w.role.to_string(),
            worker: w.name.clone(),
            excerpt: format!("{reason}\n{}", log_excerpt(&w.log)),
        }
    }

    /// Waits for worker `i` to answer ping, failing fast if it exits.
    fn await_ping(&mut self, i: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(child) = self.children[i].as_mut() {
                if let Some(status) = child.try_wait()? {
                    self.children[i] = None;
                    return Err(self.launch_failed(i, &format!("exited early with {status}")));
                }
            }
            let ep = &self.workers[i].endpoint;
            if let Ok(Message::Pong {}) = call(ep, &self.token, Message::Ping {}, Duration::from_millis(500)) {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(self.launch_failed(i, &format!("no ping reply within {timeout:?}")));
            }
            thread::sleep(Duration::from_millis(50));
        }
    }

    fn await_registration(&mut self, n_shards: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let config = self.workers[0].endpoint.clone();
        loop {
            let hello = Message::Hello {
                role: Some("orchestrator".into()),
                id: None,
                shards: None,
            };
            if let Ok(Message::Hello { shards: Some(s), .. }) =
                call(&config, &self.token, hello, Duration::from_secs(2))
            {
                if s.len() >= n_shards {
                    return Ok(());
                }
            }
            if Instant::now() >= deadline {
                let missing = self.workers.iter().position(|w| w.role == Role::Shard).unwrap_or(0);
                return Err(self.launch_failed(missing, "shards did not all register with config"));
            }
            thread::sleep(Duration::from_millis(50));
        }
    }

    /// Creating an existing collection (relaunch) is not an error.
    fn create_metrics(&self) -> Result<()> {
        let msg = Message::CreateCollection {
            name: METRICS_COLLECTION.into(),
            index_fields: METRICS_INDEXES.iter().map(|s| s.to_string()).collect(),
        };
        match call(&self.workers[0].endpoint, &self.token, msg, Duration::from_secs(10)) {
            Ok(_) | Err(Error::Conflict(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn kill_all(&mut self) {
        for (i, w) in self.workers.iter().enumerate() {
            match self.children.get_mut(i).and_then(Option::as_mut) {
                Some(child) => {
                    let _ = child.kill();
                    let _ = child.wait();
                }
                None if pid_alive(w.pid) => kill(w.pid),
                None => {}
            }
        }
        self.children.iter_mut().for_each(|c| *c = None);
    }

    fn save(&self) -> Result<()> {
        let saved = SavedCluster {
            assignment: self.assignment.clone(),
            token: self.token.clone(),
            workers: self.workers.clone(),
            endpoints_file: self.endpoints_file.clone(),
        };
        let json = serde_json::to_vec_pretty(&saved).expect("cluster state serializes");
        write_atomic(&self.data_root.join(STATE_FILE), &json)
    }

    /// Reattaches to a cluster launched by another process.
    pub fn load(data_root: &Path) -> Result<ClusterHandle> {
        let path = data_root.join(STATE_FILE);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => Error::NotFound(format!("no cluster state in {}", data_root.display())),
            _ => Error::Io(e),
        })?;
        let saved: SavedCluster =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let any_alive = saved.workers.iter().any(|w| pid_alive(w.pid));
        Ok(ClusterHandle {
            children: saved.workers.iter().map(|_| None).collect(),
            assignment: saved.assignment,
            workers: saved.workers,
            endpoints_file: saved.endpoints_file,
            data_root: data_root.to_path_buf(),
            token: saved.token,
            grace: Duration::from_secs(10),
            state: if any_alive {
                ClusterState::Ready
            } else {
                ClusterState::Stopped
            },
        })
    }

    /// Releases the worker processes so they outlive this handle, as when
    /// the launching command exits and a later one shuts the cluster down.
    pub fn detach(mut self) {
        self.children.iter_mut().for_each(|c| *c = None);
    }

    pub fn state(&self) -> ClusterState {
        self.state
    }

    pub fn token(&self) -> &str {
        &self.token
    }

    pub fn data_root(&self) -> &Path {
        &self.data_root
    }

    pub fn set_shutdown_grace(&mut self, grace: Duration) {
        self.grace = grace;
    }

    pub fn router_endpoints(&self) -> Vec<String> {
        self.workers
            .iter()
            .filter(|w| w.role == Role::Router)
            .map(|w| w.endpoint.clone())
            .collect()
    }

    pub fn pids(&self) -> Vec<u32> {
        self.workers.iter().map(|w| w.pid).collect()
    }

    /// Writes one `host:port` line per router, atomically, and exports the
    /// same list in `SHARDBATCH_ROUTERS` for child processes.
    pub fn publish_endpoints(&mut self, path: &Path) -> Result<()> {
        if self.state != ClusterState::Ready {
            return Err(Error::InvalidState(format!(
                "cannot publish endpoints of a {:?} cluster",
                self.state
            )));
        }
        let routers = self.router_endpoints();
        let mut text = String::new();
        for r in &routers {
            text.push_str(r);
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())?;
        std::env::set_var(ROUTERS_ENV, routers.join(","));
        self.endpoints_file = Some(path.to_path_buf());
        self.save()
    }

    /// Per-worker liveness: process alive and answering ping.
    pub fn status(&self) -> Vec<(WorkerInfo, bool, bool)> {
        self.workers
            .iter()
            .map(|w| {
                let alive = pid_alive(w.pid);
                let pong = alive
                    && matches!(
                        call(&w.endpoint, &self.token, Message::Ping {}, Duration::from_secs(2)),
                        Ok(Message::Pong {})
                    );
                (w.clone(), alive, pong)
            })
            .collect()
    }

    fn exited(&mut self, i: usize) -> Option<Option<i32>> {
        match self.children[i].as_mut() {
            Some(child) => match child.try_wait() {
                Ok(Some(status)) => Some(status.code()),
                Ok(None) => None,
                Err(_) => Some(None),
            },
            None => (!pid_alive(self.workers[i].pid)).then_some(None),
        }
    }

    fn stop_worker(&mut self, i: usize) -> WorkerExit {
        let w = self.workers[i].clone();
        let exit = |status| WorkerExit {
            name: w.name.clone(),
            role: w.role,
            pid: w.pid,
            status,
        };
        if self.exited(i).is_some() {
            self.children[i] = None;
            return exit(ExitStatus::AlreadyStopped);
        }
        if let Err(e) = call(&w.endpoint, &self.token, Message::Shutdown {}, self.grace) {
            log::debug!("shutdown request to {}: {e}", w.name);
        }
        let deadline = Instant::now() + self.grace;
        loop {
            if let Some(code) = self.exited(i) {
                self.children[i] = None;
                return exit(ExitStatus::Exited(code));
            }
            if Instant::now() >= deadline {
                log::warn!("{} did not stop within {:?}; killing", w.name, self.grace);
                match self.children[i].take() {
                    Some(mut child) => {
                        let _ = child.kill();
                        let _ = child.wait();
                    }
                    None => kill(w.pid),
                }
                return exit(ExitStatus::ForceKilled);
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    /// Stops routers, then shards, then the config mirror and primary.
    /// Data directories are kept. Calling it again is a no-op.
    pub fn shutdown(&mut self) -> Result<ExitReport> {
        let mut report = ExitReport::default();
        if self.state == ClusterState::Stopped {
            return Ok(report);
        }
        self.state = ClusterState::Draining;
        let order = |role: Role| {
            self.workers
                .iter()
                .enumerate()
                .filter(move |(_, w)| w.role == role)
                .map(|(i, _)| i)
        };
        let mut idx: Vec<usize> = order(Role::Router).chain(order(Role::Shard)).collect();
        idx.extend(order(Role::Config).collect::<Vec<_>>().into_iter().rev());
        for i in idx {
            report.workers.push(self.stop_worker(i));
        }
        self.state = ClusterState::Stopped;
        let lock = self.data_root.join(LOCK_FILE);
        if lock.exists() {
            fs::remove_file(lock)?;
        }
        Ok(report)
    }
}

impl Drop for ClusterHandle {
    /// A handle dropped while still owning its children kills them, so a
    /// panicking caller leaves no orphans behind.
    fn drop(&mut self) {
        if self.children.iter().any(Option::is_some) {
            self.kill_all();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hosts(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("nid{i:05}")).collect()
    }

    #[test]
    fn reference_topologies() {
        for (n, want) in [
            (32, (2, 7, 7, 16)),
            (64, (2, 15, 15, 32)),
            (128, (2, 31, 31, 64)),
            (8, (2, 1, 1, 4)),
        ] {
            assert_eq!(assign_roles(&hosts(n), true).unwrap().counts(), want, "{n} hosts");
        }
    }

    #[test]
    fn assignment_errors() {
        assert!(matches!(assign_roles(&hosts(7), true), Err(Error::TooFewNodes(7))));
        assert!(matches!(assign_roles(&hosts(10), true), Err(Error::InvalidCount(10))));
        // permissive: 10 hosts leave 3 servers, shards take the extra one
        assert_eq!(assign_roles(&hosts(10), false).unwrap().counts(), (2, 2, 1, 5));
    }

    #[test]
    fn assignment_partitions_in_order() {
        for n in (8..=200).step_by(4) {
            let h = hosts(n);
            let a = assign_roles(&h, true).unwrap();
            let all: Vec<String> = a.all_hosts().cloned().collect();
            assert_eq!(all, h);
            let (c, s, r, k) = a.counts();
            assert_eq!((c, s == r, k), (2, true, n / 2));
        }
    }

    #[test]
    fn nodefile_dedupes() {
        let nf = NodeFile::parse("nid1\nnid1\n\n  nid2 \nnid1\nnid3\n");
        assert_eq!(nf.hostnames, vec!["nid1", "nid2", "nid3"]);
    }

    #[test]
    fn config_text() {
        let mut o = LaunchOptions::new("/tmp/x");
        o.apply_config_text(
            "# c\nbase_port = 4200\nsplit_threshold=10\n\nstartup_timeout_s=5\ncluster_token=abc\ndata_root=/d\n",
        )
        .unwrap();
        assert_eq!(o.base_port, 4200);
        assert_eq!(o.split_threshold, 10);
        assert_eq!(o.startup_timeout, Duration::from_secs(5));
        assert_eq!(o.cluster_token, "abc");
        assert_eq!(o.data_root, PathBuf::from("/d"));
        assert!(matches!(o.apply_config_text("colour=blue"), Err(Error::Format(_))));
        assert!(matches!(o.apply_config_text("base_port=x"), Err(Error::Format(_))));
        assert!(matches!(o.apply_config_text("base_port"), Err(Error::Format(_))));
    }

    #[test]
    fn lockfile_liveness() {
        let dir = tempfile::tempdir().unwrap();
        acquire_lock(dir.path()).unwrap();
        // our own pid is alive
        assert!(matches!(acquire_lock(dir.path()), Err(Error::Lock(_))));
        fs::write(dir.path().join(LOCK_FILE), "999999999\n").unwrap();
        acquire_lock(dir.path()).unwrap();
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("routers.txt");
        write_atomic(&p, b"a\n").unwrap();
        write_atomic(&p, b"127.0.0.1:4200\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "127.0.0.1:4200\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
