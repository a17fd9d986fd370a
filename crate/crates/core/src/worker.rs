//! Entry point of a single worker process (config, shard or router), as
//! spawned by the orchestrator.

use std::fmt;
use std::net::TcpListener;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::config::{ConfigHandle, ConfigOptions};
use crate::error::{Error, Result};
use crate::local::METRICS_COLLECTION;
use crate::net;
use crate::router::{RouterHandle, RouterOptions};
use crate::shard::{ShardHandle, ShardOptions, DEFAULT_SPLIT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Config,
    Shard,
    Router,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Config => "config",
            Role::Shard => "shard",
            Role::Router => "router",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "config" => Ok(Role::Config),
            "shard" => Ok(Role::Shard),
            "router" => Ok(Role::Router),
            other => Err(Error::InvalidArgument(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerArgs {
    pub role: Role,
    pub id: String,
    pub listen: String,
    pub data_dir: Option<PathBuf>,
    pub token: String,
    /// Config endpoints to talk to: primary first, then mirror.
    pub config_endpoints: Vec<String>,
    /// Config primary only: the mirror to forward mutations to.
    pub mirror: Option<String>,
    pub split_threshold: u64,
    pub timeout: Duration,
    pub hang_on_shutdown: bool,
}

impl WorkerArgs {
    pub fn new(role: Role, id: impl Into<String>, listen: impl Into<String>, token: impl Into<String>) -> Self {
        WorkerArgs {
            role,
            id: id.into(),
            listen: listen.into(),
            data_dir: None,
            token: token.into(),
            config_endpoints: Vec::new(),
            mirror: None,
            split_threshold: DEFAULT_SPLIT_THRESHOLD,
            timeout: net::DEFAULT_TIMEOUT,
            hang_on_shutdown: false,
        }
    }

    fn data_dir(&self) -> Result<PathBuf> {
        self.data_dir
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("{} worker needs a data directory", self.role)))
    }
}

/// Binds, serves until a `shutdown` request arrives, then stops cleanly.
pub fn run(args: WorkerArgs) -> Result<()> {
    let listener = TcpListener::bind(&args.listen)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("bind {}: {e}", args.listen))))?;
    log::info!("{} {} listening on {}", args.role, args.id, args.listen);
    match args.role {
        Role::Config => {
            let mut opts = ConfigOptions::new(args.data_dir()?, args.token.clone());
            opts.id = args.id.clone();
            opts.mirror = args.mirror.clone();
            opts.timeout = args.timeout;
            let mut handle = ConfigHandle::start(listener, opts)?;
            handle.server.signal().wait();
            handle.stop()?;
        }
        Role::Shard => {
            let mut opts = ShardOptions::new(args.id.clone(), args.data_dir()?, args.token.clone());
            opts.config_endpoint = args.config_endpoints.first().cloned();
            opts.advertise = Some(args.listen.clone());
            opts.split_threshold = args.split_threshold;
            opts.timeout = args.timeout;
            opts.hang_on_shutdown = args.hang_on_shutdown;
            let mut handle = ShardHandle::start(listener, opts)?;
            let report = handle.server.recovery_report();
            log::info!(
                "shard {} recovered {} records from {} segments",
                args.id,
                report.records,
                report.segments
            );
            handle.server.signal().wait();
            handle.stop()?;
        }
        Role::Router => {
            let mut opts = RouterOptions::new(args.config_endpoints.clone(), args.token.clone());
            opts.id = args.id.clone();
            opts.timeout = args.timeout;
            let mut handle = RouterHandle::start(listener, opts)?;
            match handle.router.refresh_map(METRICS_COLLECTION) {
                Ok((map, _)) => log::info!("router {} loaded map v{}", args.id, map.version),
                Err(e) => log::info!("router {} has no initial map: {e}", args.id),
            }
            handle.router.signal().wait();
            handle.stop();
        }
    }
    log::info!("{} {} stopped", args.role, args.id);
    Ok(())
}
