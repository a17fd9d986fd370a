//! Cluster metadata service: shard registry, collections and chunk ranges.
//!
//! [`ClusterMetadata`] is a deterministic state machine driven by
//! [`Mutation`]s. The server persists each mutation to `meta.log` before
//! swapping in the new state, rewrites `meta.snapshot` every
//! [`SNAPSHOT_EVERY`] mutations, and (when configured) forwards every
//! mutation to a standby mirror, acknowledging only once the mirror applied it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChunkRange, IndexField, ShardId, ShardKey, ShardMap, KEY_MAX, KEY_MIN};
use crate::net::{self, Pool, Request, Responder, ServerHandle, Service, ShutdownSignal};
use crate::wire::{CollectionSpec, Message};

pub const SNAPSHOT_EVERY: u64 = 128;
pub const SNAPSHOT_FILE: &str = "meta.snapshot";
pub const LOG_FILE: &str = "meta.log";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub endpoint: String,
    pub data_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    RegisterShard {
        shard_id: ShardId,
        endpoint: String,
        data_path: String,
    },
    CreateCollection {
        name: String,
        index_fields: Vec<String>,
    },
    ReportSplit {
        collection: String,
        chunk_id: u64,
        split_key: ShardKey,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetadata {
    pub shards: BTreeMap<ShardId, ShardInfo>,
    pub collections: BTreeMap<String, ShardMap>,
    pub next_chunk_id: u64,
    pub version: u64,
}

fn least_loaded<'a>(
    candidates: impl Iterator<Item = &'a ShardId>,
    counts: &BTreeMap<ShardId, usize>,
) -> Option<ShardId> {
    // min_by_key keeps the first minimum, and candidates iterate in id order
    candidates.min_by_key(|s| counts.get(*s).copied().unwrap_or(0)).cloned()
}

impl ClusterMetadata {
    /// Applies `m`, returning whether anything changed.
    pub fn apply(&mut self, m: &Mutation) -> Result<bool> {
        match m {
            Mutation::RegisterShard {
                shard_id,
                endpoint,
                data_path,
            } => self.register_shard(shard_id, endpoint, data_path),
            Mutation::CreateCollection { name, index_fields } => {
                self.create_collection(name, index_fields).map(|_| true)
            }
            Mutation::ReportSplit {
                collection,
                chunk_id,
                split_key,
            } => self.report_split(collection, *chunk_id, split_key).map(|_| true),
        }
    }

    pub fn register_shard(&mut self, id: &ShardId, endpoint: &str, data_path: &str) -> Result<bool> {
        if let Some(existing) = self.shards.get(id) {
            if existing.endpoint == endpoint {
                return Ok(false);
            }
            return Err(Error::Conflict(format!(
                "shard {id} already registered at {}, not {endpoint}",
                existing.endpoint
            )));
        }
        self.version += 1;
        self.shards.insert(
            id.clone(),
            ShardInfo {
                endpoint: endpoint.to_string(),
                data_path: data_path.to_string(),
            },
        );
        for map in self.collections.values_mut() {
            map.shard_endpoints.insert(id.clone(), endpoint.to_string());
            map.version = self.version;
        }
        Ok(true)
    }

    pub fn create_collection(&mut self, name: &str, index_fields: &[String]) -> Result<ShardMap> {
        if self.shards.is_empty() {
            return Err(Error::Precondition("no shards registered".into()));
        }
        if self.collections.contains_key(name) {
            return Err(Error::Conflict(format!("collection {name} already exists")));
        }
        for f in index_fields {
            f.parse::<IndexField>()?;
        }
        let mut counts: BTreeMap<ShardId, usize> = self.shards.keys().map(|s| (s.clone(), 0)).collect();
        for map in self.collections.values() {
            for (s, n) in map.chunk_counts() {
                *counts.entry(s).or_default() += n;
            }
        }
        let owner = least_loaded(self.shards.keys(), &counts).expect("shards non-empty");
        self.version += 1;
        let chunk_id = self.next_chunk_id;
        self.next_chunk_id += 1;
        let map = ShardMap {
            version: self.version,
            collection: name.to_string(),
            chunks: vec![ChunkRange {
                chunk_id,
                lo: KEY_MIN,
                hi: KEY_MAX,
                owner_shard: owner.clone(),
                approx_doc_count: 0,
                holders: BTreeSet::from([owner]),
            }],
            shard_endpoints: self
                .shards
                .iter()
                .map(|(id, info)| (id.clone(), info.endpoint.clone()))
                .collect(),
            index_fields: index_fields.to_vec(),
        };
        self.collections.insert(name.to_string(), map.clone());
        Ok(map)
    }

    /// Splits chunk `chunk_id` at `split_key`. The lower half keeps its
    /// owner; the upper half goes to the shard owning the fewest chunks of
    /// the collection (ties: lowest shard id).
    pub fn report_split(&mut self, collection: &str, chunk_id: u64, split_key: &ShardKey) -> Result<ShardMap> {
        let shard_ids: Vec<ShardId> = self.shards.keys().cloned().collect();
        let map = self
            .collections
            .get_mut(collection)
            .ok_or_else(|| Error::NotFound(format!("collection {collection}")))?;
        let idx = map.chunks.iter().position(|c| c.chunk_id == chunk_id).ok_or_else(|| {
            Error::StaleVersion(format!(
                "chunk {chunk_id} no longer exists in {collection} (map version {})",
                map.version
            ))
        })?;
        let parent = &map.chunks[idx];
        if split_key.is_sentinel() || *split_key <= parent.lo || *split_key >= parent.hi {
            return Err(Error::InvalidSplit(format!(
                "{split_key} is not strictly inside chunk {chunk_id} [{}, {})",
                parent.lo, parent.hi
            )));
        }
        let parent = map.chunks.remove(idx);
        let mut counts = map.chunk_counts();
        for s in &shard_ids {
            counts.entry(s.clone()).or_default();
        }
        *counts.entry(parent.owner_shard.clone()).or_default() += 1; // the lower half
        let new_owner = least_loaded(shard_ids.iter(), &counts).expect("shards non-empty");

        let mut held = parent.holders.clone();
        held.insert(parent.owner_shard.clone());
        let lower_count = parent.approx_doc_count / 2;
        let lower = ChunkRange {
            chunk_id: self.next_chunk_id,
            lo: parent.lo.clone(),
            hi: split_key.clone(),
            owner_shard: parent.owner_shard.clone(),
            approx_doc_count: lower_count,
            holders: held.clone(),
        };
        let mut upper_holders = held;
        upper_holders.insert(new_owner.clone());
        let upper = ChunkRange {
            chunk_id: self.next_chunk_id + 1,
            lo: split_key.clone(),
            hi: parent.hi.clone(),
            owner_shard: new_owner,
            approx_doc_count: parent.approx_doc_count - lower_count,
            holders: upper_holders,
        };
        self.next_chunk_id += 2;
        map.chunks.insert(idx, upper);
        map.chunks.insert(idx, lower);
        self.version += 1;
        map.version = self.version;
        Ok(map.clone())
    }

    /// `Ok(None)` means not modified.
    pub fn get_shardmap(&self, collection: &str, known_version: u64) -> Result<Option<ShardMap>> {
        let map = self
            .collections
            .get(collection)
            .ok_or_else(|| Error::NotFound(format!("collection {collection}")))?;
        Ok((map.version > known_version).then(|| map.clone()))
    }

    pub fn collection_specs(&self) -> Vec<CollectionSpec> {
        self.collections
            .values()
            .map(|m| CollectionSpec {
                name: m.collection.clone(),
                index_fields: m.index_fields.clone(),
            })
            .collect()
    }

    /// Canonical serialized form, used for snapshots and mirror comparison.
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("metadata serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LogEntry {
    version: u64,
    mutation: Mutation,
}

/// Snapshot plus append-only mutation log in one directory.
pub struct MetaStore {
    dir: PathBuf,
    log: File,
    since_snapshot: u64,
}

impl MetaStore {
    pub fn open(dir: &Path) -> Result<(MetaStore, ClusterMetadata)> {
        fs::create_dir_all(dir)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut meta = if snap_path.exists() {
            serde_json::from_slice(&fs::read(&snap_path)?)
                .map_err(|e| Error::Recovery(format!("{}: {e}", snap_path.display())))?
        } else {
            ClusterMetadata::default()
        };
        let log_path = dir.join(LOG_FILE);
        let mut replayed = 0;
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = match serde_json::from_str(&line) {
                    Ok(e) => e,
                    Err(e) => {
                        log::warn!("{}:{}: ignoring torn log line: {e}", log_path.display(), lineno + 1);
                        break;
                    }
                };
                if entry.version <= meta.version {
                    continue;
                }
                meta.apply(&entry.mutation)?;
                if meta.version != entry.version {
                    return Err(Error::Recovery(format!(
                        "log entry {} replayed to version {}",
                        entry.version, meta.version
                    )));
                }
                replayed += 1;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok((
            MetaStore {
                dir: dir.to_path_buf(),
                log,
                since_snapshot: replayed,
            },
            meta,
        ))
    }

    pub fn append(&mut self, version: u64, mutation: &Mutation) -> Result<()> {
        let mut line = serde_json::to_vec(&LogEntry {
            version,
            mutation: mutation.clone(),
        })
        .map_err(|e| Error::Storage(e.to_string()))?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        self.since_snapshot += 1;
        Ok(())
    }

    pub fn maybe_snapshot(&mut self, meta: &ClusterMetadata) -> Result<()> {
        if self.since_snapshot >= SNAPSHOT_EVERY {
            self.snapshot(meta)?;
        }
        Ok(())
    }

    pub fn snapshot(&mut self, meta: &ClusterMetadata) -> Result<()> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&meta.to_snapshot_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        // entries at or below the snapshot version are skipped on replay,
        // so a crash between rename and truncate is harmless
        self.log.set_len(0)?;
        self.log.sync_all()?;
        self.since_snapshot = 0;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConfigOptions {
    pub id: String,
    pub data_dir: PathBuf,
    pub token: String,
    pub mirror: Option<String>,
    pub timeout: Duration,
}

impl ConfigOptions {
    pub fn new(data_dir: impl Into<PathBuf>, token: impl Into<String>) -> Self {
        ConfigOptions {
            id: "config-0".into(),
            data_dir: data_dir.into(),
            token: token.into(),
            mirror: None,
            timeout: net::DEFAULT_TIMEOUT,
        }
    }
}

/// The config server's request handler and state.
pub struct ConfigServer {
    opts: ConfigOptions,
    state: RwLock<Arc<ClusterMetadata>>,
    store: Mutex<MetaStore>,
    pool: Pool,
    signal: Arc<ShutdownSignal>,
}

impl ConfigServer {
    pub fn open(opts: ConfigOptions) -> Result<Arc<ConfigServer>> {
        let (store, meta) = MetaStore::open(&opts.data_dir)?;
        Ok(Arc::new(ConfigServer {
            pool: Pool::new(opts.token.clone(), opts.timeout),
            state: RwLock::new(Arc::new(meta)),
            store: Mutex::new(store),
            signal: Arc::new(ShutdownSignal::default()),
            opts,
        }))
    }

    pub fn metadata(&self) -> Arc<ClusterMetadata> {
        self.state.read().unwrap().clone()
    }

    pub fn signal(&self) -> Arc<ShutdownSignal> {
        self.signal.clone()
    }

    /// Single-writer mutation path: apply to a copy, mirror, log, swap.
    fn mutate(&self, m: &Mutation, forward: bool) -> Result<Arc<ClusterMetadata>> {
        let mut store = self.store.lock().unwrap();
        let current = self.metadata();
        let mut next = (*current).clone();
        if !next.apply(m)? {
            return Ok(current);
        }
        if forward {
            if let Some(mirror) = &self.opts.mirror {
                self.pool
                    .call(mirror, Message::MirrorApply { mutation: m.clone() })
                    .map_err(|e| Error::MetadataUnavailable(format!("mirror {mirror} did not apply: {e}")))?;
            }
        }
        store.append(next.version, m)?;
        let next = Arc::new(next);
        *self.state.write().unwrap() = next.clone();
        store.maybe_snapshot(&next)?;
        Ok(next)
    }

    pub fn register_shard(&self, id: &ShardId, endpoint: &str, data_path: &str) -> Result<Vec<CollectionSpec>> {
        let meta = self.mutate(
            &Mutation::RegisterShard {
                shard_id: id.clone(),
                endpoint: endpoint.into(),
                data_path: data_path.into(),
            },
            true,
        )?;
        Ok(meta.collection_specs())
    }

    pub fn create_collection(&self, name: &str, index_fields: &[String]) -> Result<ShardMap> {
        let meta = self.mutate(
            &Mutation::CreateCollection {
                name: name.into(),
                index_fields: index_fields.to_vec(),
            },
            true,
        )?;
        let map = meta.collections[name].clone();
        for (id, info) in &meta.shards {
            let msg = Message::CreateCollection {
                name: name.into(),
                index_fields: index_fields.to_vec(),
            };
            if let Err(e) = self.pool.call(&info.endpoint, msg) {
                log::warn!("could not propagate collection {name} to shard {id}: {e}");
            }
        }
        Ok(map)
    }

    pub fn report_split(&self, collection: &str, chunk_id: u64, split_key: &ShardKey) -> Result<ShardMap> {
        let meta = self.mutate(
            &Mutation::ReportSplit {
                collection: collection.into(),
                chunk_id,
                split_key: split_key.clone(),
            },
            true,
        )?;
        Ok(meta.collections[collection].clone())
    }

    pub fn get_shardmap(&self, collection: &str, known_version: u64) -> Result<Option<ShardMap>> {
        self.metadata().get_shardmap(collection, known_version)
    }

    pub fn snapshot(&self) -> Result<()> {
        let meta = self.metadata();
        self.store.lock().unwrap().snapshot(&meta)
    }

    fn dispatch(&self, message: Message) -> Result<Message> {
        match message {
            Message::Ping {} => Ok(Message::Pong {}),
            Message::Hello { .. } => Ok(Message::Hello {
                role: Some("config".into()),
                id: Some(self.opts.id.clone()),
                shards: Some(self.metadata().shards.keys().cloned().collect()),
            }),
            Message::RegisterShard {
                shard_id,
                endpoint,
                data_path,
            } => self
                .register_shard(&shard_id, &endpoint, &data_path)
                .map(|collections| Message::Registered { collections }),
            Message::CreateCollection { name, index_fields } => self
                .create_collection(&name, &index_fields)
                .map(|map| Message::Shardmap { map }),
            Message::ReportSplit {
                collection,
                chunk_id,
                split_key,
            } => self
                .report_split(&collection, chunk_id, &split_key)
                .map(|map| Message::Shardmap { map }),
            Message::GetShardmap {
                collection,
                known_version,
            } => Ok(match self.get_shardmap(&collection, known_version)? {
                Some(map) => Message::Shardmap { map },
                None => Message::NotModified { version: known_version },
            }),
            Message::MirrorApply { mutation } => self.mutate(&mutation, false).map(|_| Message::Ack {}),
            Message::Shutdown {} => {
                self.snapshot()?;
                self.signal.trigger();
                Ok(Message::Ack {})
            }
            other => Err(Error::Protocol(format!(
                "config server does not handle {}",
                other.type_name()
            ))),
        }
    }
}

impl Service for ConfigServer {
    fn handle(&self, req: Request, out: &Responder) {
        out.reply(self.dispatch(req.message));
    }
}

/// A running config server bound to a TCP listener.
pub struct ConfigHandle {
    pub server: Arc<ConfigServer>,
    pub net: ServerHandle,
}

impl ConfigHandle {
    pub fn start(listener: TcpListener, opts: ConfigOptions) -> Result<ConfigHandle> {
        let token = opts.token.clone();
        let server = ConfigServer::open(opts)?;
        let net = net::serve(listener, server.clone(), Some(token), server.signal())?;
        Ok(ConfigHandle { server, net })
    }

    pub fn endpoint(&self) -> String {
        self.net.endpoint()
    }

    pub fn stop(&mut self) -> Result<()> {
        self.net.stop();
        self.server.snapshot()
    }
}
