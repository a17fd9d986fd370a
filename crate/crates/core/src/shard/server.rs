use std::collections::BTreeSet;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{Filter, MetricDocument, ShardId, ShardMap};
use crate::net::{self, Pool, Request, Responder, ServerHandle, Service, ShutdownSignal};
use crate::shard::store::{RecoveryReport, SegmentStore, StoreOptions};
use crate::wire::{Message, FIND_PAGE_SIZE};

pub const DEFAULT_SPLIT_THRESHOLD: u64 = 4096;

#[derive(Debug, Clone)]
pub struct ShardOptions {
    pub shard_id: ShardId,
    pub data_dir: PathBuf,
    pub token: String,
    /// Config server to register with and report splits to.
    pub config_endpoint: Option<String>,
    /// Endpoint registered with the config server; defaults to the bound address.
    pub advertise: Option<String>,
    pub split_threshold: u64,
    pub timeout: Duration,
    pub store: StoreOptions,
    /// Test hook: acknowledge `shutdown` but keep running.
    pub hang_on_shutdown: bool,
}

impl ShardOptions {
    pub fn new(shard_id: impl Into<String>, data_dir: impl Into<PathBuf>, token: impl Into<String>) -> Self {
        ShardOptions {
            shard_id: ShardId::new(shard_id),
            data_dir: data_dir.into(),
            token: token.into(),
            config_endpoint: None,
            advertise: None,
            split_threshold: DEFAULT_SPLIT_THRESHOLD,
            timeout: net::DEFAULT_TIMEOUT,
            store: StoreOptions::default(),
            hang_on_shutdown: false,
        }
    }
}

pub struct ShardServer {
    opts: ShardOptions,
    store: RwLock<SegmentStore>,
    /// Highest shard-map version seen for this shard's routing epoch.
    known_version: AtomicU64,
    map: RwLock<Option<Arc<ShardMap>>>,
    split_lock: Mutex<()>,
    pool: Pool,
    signal: Arc<ShutdownSignal>,
    recovery: RecoveryReport,
}

impl ShardServer {
    pub fn open(opts: ShardOptions) -> Result<Arc<ShardServer>> {
        let (store, recovery) = SegmentStore::open(&opts.data_dir, opts.store.clone())?;
        Ok(Arc::new(ShardServer {
            pool: Pool::new(opts.token.clone(), opts.timeout),
            store: RwLock::new(store),
            known_version: AtomicU64::new(0),
            map: RwLock::new(None),
            split_lock: Mutex::new(()),
            signal: Arc::new(ShutdownSignal::default()),
            recovery,
            opts,
        }))
    }

    pub fn id(&self) -> &ShardId {
        &self.opts.shard_id
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn live_doc_count(&self) -> usize {
        self.store.read().unwrap().live_doc_count()
    }

    pub fn known_version(&self) -> u64 {
        self.known_version.load(Ordering::SeqCst)
    }

    pub fn signal(&self) -> Arc<ShutdownSignal> {
        self.signal.clone()
    }

    /// Read access to the underlying store, for inspection.
    pub fn with_store<T>(&self, f: impl FnOnce(&SegmentStore) -> T) -> T {
        f(&self.store.read().unwrap())
    }

    fn check_collection(&self, store: &SegmentStore, collection: &str) -> Result<()> {
        match store.collection() {
            Some(c) if c == collection => Ok(()),
            _ => Err(Error::NotFound(format!(
                "collection {collection} on shard {}",
                self.opts.shard_id
            ))),
        }
    }

    fn cached_map(&self) -> Option<Arc<ShardMap>> {
        self.map.read().unwrap().clone()
    }

    fn install_map(&self, map: ShardMap) -> Arc<ShardMap> {
        let map = Arc::new(map);
        let mut slot = self.map.write().unwrap();
        if slot.as_ref().is_none_or(|m| m.version < map.version) {
            *slot = Some(map.clone());
        }
        self.known_version.fetch_max(map.version, Ordering::SeqCst);
        slot.clone().unwrap()
    }

    /// Map at least as new as `min_version`, refreshed from config if needed.
    fn current_map(&self, collection: &str, min_version: u64) -> Option<Arc<ShardMap>> {
        if let Some(m) = self.cached_map() {
            if m.version >= min_version && m.collection == collection {
                return Some(m);
            }
        }
        let config = self.opts.config_endpoint.as_ref()?;
        let msg = Message::GetShardmap {
            collection: collection.to_string(),
            known_version: 0,
        };
        match self.pool.call(config, msg) {
            Ok(Message::Shardmap { map }) => Some(self.install_map(map)),
            Ok(other) => {
                log::warn!("unexpected {} from config", other.type_name());
                None
            }
            Err(e) => {
                log::warn!("shard {}: cannot refresh map: {e}", self.opts.shard_id);
                None
            }
        }
    }

    /// Unordered batch insert with routing-epoch check.
    ///
    /// A batch tagged with a map version older than this shard's epoch is
    /// rejected as stale only if it holds a document this shard no longer
    /// owns; otherwise routing was still correct and the batch is applied.
    pub fn insert_batch(&self, collection: &str, docs: &[MetricDocument], map_version: u64) -> Result<Message> {
        let known = self.known_version();
        let epoch_map = if map_version < known {
            self.current_map(collection, known)
        } else {
            None
        };
        let result = {
            let mut store = self.store.write().unwrap();
            self.check_collection(&store, collection)?;
            let known = self.known_version();
            if map_version < known {
                let owns_all = epoch_map.as_ref().is_some_and(|m| {
                    m.version >= known && docs.iter().all(|d| *m.owner_of(&d.shard_key()) == self.opts.shard_id)
                });
                if !owns_all {
                    return Ok(Message::StaleVersion {
                        collection: collection.to_string(),
                        version: known,
                    });
                }
            }
            self.known_version.fetch_max(map_version, Ordering::SeqCst);
            store.insert_batch(docs)?
        };
        if result.inserted_count > 0 {
            self.maybe_split(collection, docs);
        }
        Ok(Message::InsertBatchResult { result })
    }

    /// Splits every chunk touched by `docs` that this shard owns until none
    /// holds more than the threshold, reporting each split to config.
    pub fn maybe_split(&self, collection: &str, docs: &[MetricDocument]) -> Vec<ShardMap> {
        const MAX_ROUNDS: usize = 64;
        let mut reported = Vec::new();
        let Some(config) = self.opts.config_endpoint.clone() else {
            return reported;
        };
        let _guard = self.split_lock.lock().unwrap();
        for _ in 0..MAX_ROUNDS {
            let Some(map) = self.current_map(collection, self.known_version()) else {
                break;
            };
            let touched: BTreeSet<usize> = docs.iter().map(|d| map.chunk_index_for(&d.shard_key())).collect();
            let mut progressed = false;
            for idx in touched {
                let chunk = &map.chunks[idx];
                if chunk.owner_shard != self.opts.shard_id {
                    continue;
                }
                let candidate = self
                    .store
                    .read()
                    .unwrap()
                    .split_candidate(chunk, self.opts.split_threshold);
                let Some(split_key) = candidate else { continue };
                let msg = Message::ReportSplit {
                    collection: collection.to_string(),
                    chunk_id: chunk.chunk_id,
                    split_key: split_key.clone(),
                };
                match self.pool.call(&config, msg) {
                    Ok(Message::Shardmap { map }) => {
                        log::info!(
                            "shard {}: split chunk {} at {split_key} -> map v{}",
                            self.opts.shard_id,
                            chunk.chunk_id,
                            map.version
                        );
                        self.install_map(map.clone());
                        reported.push(map);
                        progressed = true;
                    }
                    Ok(other) => log::warn!("unexpected {} from config", other.type_name()),
                    Err(e) => log::warn!("split of chunk {} not recorded: {e}", chunk.chunk_id),
                }
                // chunk ids in `map` are outdated after a split
                if progressed {
                    break;
                }
            }
            if !progressed {
                break;
            }
        }
        reported
    }

    pub fn find_local(
        &self,
        collection: &str,
        filter: &Filter,
        mut on_page: impl FnMut(Vec<MetricDocument>) -> Result<()>,
    ) -> Result<u64> {
        filter.validate()?;
        let locators = {
            let store = self.store.read().unwrap();
            self.check_collection(&store, collection)?;
            store.locate(filter)?
        };
        for page in locators.chunks(FIND_PAGE_SIZE) {
            let docs = page.iter().map(|l| l.read()).collect::<Result<Vec<_>>>()?;
            on_page(docs)?;
        }
        Ok(locators.len() as u64)
    }

    pub fn create_collection(&self, name: &str, index_fields: &[String]) -> Result<()> {
        self.store.write().unwrap().ensure_collection(name, index_fields)
    }

    pub fn create_index(&self, collection: &str, field: &str) -> Result<()> {
        let mut store = self.store.write().unwrap();
        self.check_collection(&store, collection)?;
        store.create_index(field)
    }

    /// Registers with the config server, retrying until `deadline`.
    pub fn register(&self, endpoint: &str, deadline: Instant) -> Result<()> {
        let Some(config) = &self.opts.config_endpoint else {
            return Ok(());
        };
        let msg = Message::RegisterShard {
            shard_id: self.opts.shard_id.clone(),
            endpoint: endpoint.to_string(),
            data_path: self.opts.data_dir.display().to_string(),
        };
        loop {
            match self.pool.call(config, msg.clone()) {
                Ok(Message::Registered { collections }) => {
                    for c in collections {
                        self.create_collection(&c.name, &c.index_fields)?;
                    }
                    return Ok(());
                }
                Ok(other) => return Err(Error::Protocol(format!("unexpected {} on register", other.type_name()))),
                Err(e @ (Error::NodeDown(_) | Error::Timeout(_) | Error::MetadataUnavailable(_)))
                    if Instant::now() < deadline =>
                {
                    log::debug!("register retry: {e}");
                    thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn dispatch(&self, message: Message, out: &Responder) -> Result<Option<Message>> {
        let reply = match message {
            Message::Ping {} => Message::Pong {},
            Message::Hello { .. } => Message::Hello {
                role: Some("shard".into()),
                id: Some(self.opts.shard_id.to_string()),
                shards: None,
            },
            Message::CreateCollection { name, index_fields } => {
                self.create_collection(&name, &index_fields)?;
                Message::Ack {}
            }
            Message::CreateIndex { collection, field } => {
                self.create_index(&collection, &field)?;
                Message::Ack {}
            }
            Message::InsertBatch {
                collection,
                docs,
                map_version,
                ordered,
            } => {
                if ordered {
                    return Err(Error::UnsupportedMode);
                }
                self.insert_batch(&collection, &docs, map_version)?
            }
            Message::Exists { collection, doc_ids } => {
                let store = self.store.read().unwrap();
                self.check_collection(&store, &collection)?;
                Message::ExistsResult {
                    doc_ids: store.existing(&doc_ids),
                }
            }
            Message::Find {
                collection,
                filter,
                map_version,
            } => {
                let known = self.known_version();
                if map_version != 0 && map_version < known {
                    return Ok(Some(Message::StaleVersion {
                        collection,
                        version: known,
                    }));
                }
                let count = self.find_local(&collection, &filter, |docs| out.send(Message::FindBatch { docs }))?;
                Message::EndOfResults { count }
            }
            Message::Shutdown {} => {
                self.store.read().unwrap().sync()?;
                if self.opts.hang_on_shutdown {
                    log::warn!("shard {}: ignoring shutdown (test hook)", self.opts.shard_id);
                } else {
                    self.signal.trigger();
                }
                Message::Ack {}
            }
            other => return Err(Error::Protocol(format!("shard does not handle {}", other.type_name()))),
        };
        Ok(Some(reply))
    }
}

impl Service for ShardServer {
    fn handle(&self, req: Request, out: &Responder) {
        match self.dispatch(req.message, out) {
            Ok(Some(m)) => out.reply(Ok(m)),
            Ok(None) => {}
            Err(e) => out.reply(Err(e)),
        }
    }
}

pub struct ShardHandle {
    pub server: Arc<ShardServer>,
    pub net: ServerHandle,
}

impl ShardHandle {
    /// Recovers the store, starts serving, then registers with config.
    pub fn start(listener: TcpListener, opts: ShardOptions) -> Result<ShardHandle> {
        let token = opts.token.clone();
        let timeout = opts.timeout;
        let advertise = match &opts.advertise {
            Some(a) => a.clone(),
            None => listener.local_addr()?.to_string(),
        };
        let server = ShardServer::open(opts)?;
        let net = net::serve(listener, server.clone(), Some(token), server.signal())?;
        server.register(&advertise, Instant::now() + timeout)?;
        Ok(ShardHandle { server, net })
    }

    pub fn endpoint(&self) -> String {
        self.net.endpoint()
    }

    pub fn stop(&mut self) -> Result<()> {
        self.net.stop();
        self.server.store.read().unwrap().sync()
    }
}
