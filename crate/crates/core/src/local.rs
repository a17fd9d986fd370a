//! A whole cluster inside one process, on loopback ports. Useful for
//! embedding and for tests that do not need real worker processes.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::config::{ConfigHandle, ConfigOptions};
use crate::error::Result;
use crate::router::{RouterClient, RouterHandle, RouterOptions};
use crate::shard::{ShardHandle, ShardOptions, DEFAULT_SPLIT_THRESHOLD};

pub const METRICS_COLLECTION: &str = "metrics";
pub const METRICS_INDEXES: [&str; 2] = ["timestamp", "node_id"];

#[derive(Debug, Clone)]
pub struct LocalClusterOptions {
    pub shards: usize,
    pub routers: usize,
    pub split_threshold: u64,
    pub token: String,
    pub timeout: Duration,
    /// Create the metrics collection once every shard has registered.
    pub create_metrics: bool,
    /// Fixed ports (config, then shards, then routers) instead of ephemeral
    /// ones; a restart must reuse its shard endpoints.
    pub base_port: Option<u16>,
}

impl Default for LocalClusterOptions {
    fn default() -> Self {
        LocalClusterOptions {
            shards: 2,
            routers: 1,
            split_threshold: DEFAULT_SPLIT_THRESHOLD,
            token: "local".into(),
            timeout: Duration::from_secs(10),
            create_metrics: true,
            base_port: None,
        }
    }
}

pub struct LocalCluster {
    pub config: ConfigHandle,
    pub shards: Vec<ShardHandle>,
    pub routers: Vec<RouterHandle>,
    pub data_root: PathBuf,
    opts: LocalClusterOptions,
}

fn loopback(base: Option<u16>, offset: usize) -> Result<TcpListener> {
    let port = base.map_or(0, |b| b + offset as u16);
    Ok(TcpListener::bind(("127.0.0.1", port))?)
}

impl LocalCluster {
    pub fn start(data_root: &Path, opts: LocalClusterOptions) -> Result<LocalCluster> {
        let mut copts = ConfigOptions::new(data_root.join("config-0"), opts.token.clone());
        copts.timeout = opts.timeout;
        let config = ConfigHandle::start(loopback(opts.base_port, 0)?, copts)?;
        let mut cluster = LocalCluster {
            config,
            shards: Vec::new(),
            routers: Vec::new(),
            data_root: data_root.to_path_buf(),
            opts: opts.clone(),
        };
        for i in 0..opts.shards {
            cluster.add_shard(i)?;
        }
        if opts.create_metrics {
            let fields: Vec<String> = METRICS_INDEXES.iter().map(|s| s.to_string()).collect();
            cluster.config.server.create_collection(METRICS_COLLECTION, &fields)?;
        }
        for i in 0..opts.routers {
            let mut ropts = RouterOptions::new(vec![cluster.config.endpoint()], opts.token.clone());
            ropts.id = format!("router-{i}");
            ropts.timeout = opts.timeout;
            cluster.routers.push(RouterHandle::start(
                loopback(opts.base_port, 1 + opts.shards + i)?,
                ropts,
            )?);
        }
        Ok(cluster)
    }

    fn add_shard(&mut self, i: usize) -> Result<()> {
        let mut sopts = ShardOptions::new(
            format!("shard-{i}"),
            self.data_root.join(format!("shard-{i}")),
            self.opts.token.clone(),
        );
        sopts.config_endpoint = Some(self.config.endpoint());
        sopts.split_threshold = self.opts.split_threshold;
        sopts.timeout = self.opts.timeout;
        self.shards
            .push(ShardHandle::start(loopback(self.opts.base_port, 1 + i)?, sopts)?);
        Ok(())
    }

    pub fn router_endpoints(&self) -> Vec<String> {
        self.routers.iter().map(RouterHandle::endpoint).collect()
    }

    pub fn client(&self, router: usize) -> Result<RouterClient> {
        RouterClient::connect(&self.routers[router].endpoint(), self.opts.timeout)
    }

    /// Stops routers, then shards, then config.
    pub fn stop(mut self) -> Result<()> {
        for r in &mut self.routers {
            r.stop();
        }
        for s in &mut self.shards {
            s.stop()?;
        }
        self.config.stop()
    }
}
