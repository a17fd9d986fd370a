//! The client-facing router: shard-map cache, unordered insert fan-out and
//! scatter-gather finds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::{DocId, Filter, InsertError, InsertManyResult, MetricDocument, ShardId, ShardMap, DUPLICATE_KEY};
use crate::net::{self, Connection, Pool, Request, Responder, ServerHandle, Service, ShutdownSignal};
use crate::wire::Message;

pub const RETRY_BUDGET: usize = 3;

#[derive(Debug, Clone)]
pub struct RouterOptions {
    pub id: String,
    /// Config primary first, then its mirror.
    pub config_endpoints: Vec<String>,
    pub token: String,
    pub timeout: Duration,
}

impl RouterOptions {
    pub fn new(config_endpoints: Vec<String>, token: impl Into<String>) -> Self {
        RouterOptions {
            id: "router-0".into(),
            config_endpoints,
            token: token.into(),
            timeout: net::DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refresh {
    Updated,
    NotModified,
}

/// Cached shard map with the instant it was fetched.
#[derive(Debug, Clone)]
pub struct CachedMap {
    pub map: Arc<ShardMap>,
    pub fetched_at: Instant,
}

enum ShardEvent {
    Page(Vec<MetricDocument>),
    Done,
    Failed(ShardId, Error),
}

pub struct Router {
    opts: RouterOptions,
    cache: RwLock<HashMap<String, CachedMap>>,
    pool: Pool,
    signal: Arc<ShutdownSignal>,
}

impl Router {
    pub fn new(opts: RouterOptions) -> Arc<Router> {
        Arc::new(Router {
            pool: Pool::new(opts.token.clone(), opts.timeout),
            cache: RwLock::new(HashMap::new()),
            signal: Arc::new(ShutdownSignal::default()),
            opts,
        })
    }

    pub fn signal(&self) -> Arc<ShutdownSignal> {
        self.signal.clone()
    }

    pub fn cached(&self, collection: &str) -> Option<CachedMap> {
        self.cache.read().unwrap().get(collection).cloned()
    }

    /// Asks config for a map newer than the cached one.
    pub fn refresh_map(&self, collection: &str) -> Result<(Arc<ShardMap>, Refresh)> {
        let known = self.cached(collection).map_or(0, |c| c.map.version);
        let mut last_err = None;
        for config in &self.opts.config_endpoints {
            let msg = Message::GetShardmap {
                collection: collection.to_string(),
                known_version: known,
            };
            match self.pool.call(config, msg) {
                Ok(Message::Shardmap { map }) => {
                    map.validate()?;
                    return Ok((self.install(map), Refresh::Updated));
                }
                Ok(Message::NotModified { .. }) => {
                    let c = self.cached(collection).expect("not-modified implies a cached map");
                    return Ok((c.map, Refresh::NotModified));
                }
                Ok(other) => last_err = Some(Error::Protocol(format!("unexpected {}", other.type_name()))),
                Err(e @ Error::NotFound(_)) => return Err(e),
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::MetadataUnavailable(match last_err {
            Some(e) => e.to_string(),
            None => "no config endpoints".into(),
        }))
    }

    fn install(&self, map: ShardMap) -> Arc<ShardMap> {
        let mut cache = self.cache.write().unwrap();
        let slot = cache.entry(map.collection.clone());
        let entry = slot.or_insert_with(|| CachedMap {
            map: Arc::new(map.clone()),
            fetched_at: Instant::now(),
        });
        if entry.map.version < map.version {
            *entry = CachedMap {
                map: Arc::new(map),
                fetched_at: Instant::now(),
            };
        }
        entry.map.clone()
    }

    fn map(&self, collection: &str) -> Result<Arc<ShardMap>> {
        match self.cached(collection) {
            Some(c) => Ok(c.map),
            None => self.refresh_map(collection).map(|(m, _)| m),
        }
    }

    fn endpoint<'m>(&self, map: &'m ShardMap, shard: &ShardId) -> Result<&'m str> {
        map.shard_endpoints
            .get(shard)
            .map(String::as_str)
            .ok_or_else(|| Error::Routing(format!("no endpoint for shard {shard}")))
    }

    /// Doc ids (by batch index) already stored on a shard other than the
    /// current owner. Splits never move data, so earlier holders of a chunk
    /// must be consulted to keep doc ids unique cluster-wide.
    fn held_elsewhere(
        &self,
        collection: &str,
        map: &ShardMap,
        docs: &[MetricDocument],
        pending: &[usize],
    ) -> BTreeMap<usize, std::result::Result<(), Error>> {
        let mut by_holder: BTreeMap<ShardId, Vec<usize>> = BTreeMap::new();
        for &i in pending {
            let chunk = map.chunk_for(&docs[i].shard_key());
            for h in &chunk.holders {
                if *h != chunk.owner_shard {
                    by_holder.entry(h.clone()).or_default().push(i);
                }
            }
        }
        let mut out = BTreeMap::new();
        for (holder, idxs) in by_holder {
            let ids: Vec<DocId> = idxs.iter().map(|&i| docs[i].doc_id).collect();
            let reply = self.endpoint(map, &holder).and_then(|ep| {
                self.pool.call(
                    ep,
                    Message::Exists {
                        collection: collection.to_string(),
                        doc_ids: ids,
                    },
                )
            });
            match reply {
                Ok(Message::ExistsResult { doc_ids }) => {
                    let found: BTreeSet<DocId> = doc_ids.into_iter().collect();
                    for i in idxs {
                        if found.contains(&docs[i].doc_id) {
                            out.insert(i, Ok(()));
                        }
                    }
                }
                Ok(other) => {
                    for i in idxs {
                        out.insert(i, Err(Error::Protocol(format!("unexpected {}", other.type_name()))));
                    }
                }
                Err(e) => {
                    for i in idxs {
                        out.entry(i)
                            .or_insert_with(|| Err(Error::NodeDown(format!("holder {holder}: {e}"))));
                    }
                }
            }
        }
        out
    }

    /// Unordered insert_many: group by owning shard, dispatch sub-batches
    /// concurrently, re-map per-document errors to original indices. A
    /// sub-batch answered with `stale_version` is regrouped under a
    /// refreshed map and retried, at most [`RETRY_BUDGET`] times.
    pub fn route_insert_many(
        &self,
        collection: &str,
        docs: &[MetricDocument],
        ordered: bool,
    ) -> Result<InsertManyResult> {
        if ordered {
            return Err(Error::UnsupportedMode);
        }
        let mut result = InsertManyResult::default();
        if docs.is_empty() {
            return Ok(result);
        }
        let fail = |result: &mut InsertManyResult, i: usize, e: &Error| {
            result.errors.push(InsertError {
                batch_index: i,
                code: e.code().to_string(),
                message: e.to_string(),
            })
        };
        let mut map = self.map(collection)?;
        let mut pending: Vec<usize> = (0..docs.len()).collect();
        let mut reached = 0usize;
        let mut unreachable = 0usize;
        for attempt in 0..=RETRY_BUDGET {
            let mut rejected = BTreeSet::new();
            for (i, found) in self.held_elsewhere(collection, &map, docs, &pending) {
                match found {
                    Ok(()) => result.errors.push(InsertError {
                        batch_index: i,
                        code: DUPLICATE_KEY.into(),
                        message: format!("duplicate doc_id {}", docs[i].doc_id),
                    }),
                    Err(e) => fail(&mut result, i, &e),
                }
                rejected.insert(i);
            }
            let mut groups: BTreeMap<ShardId, Vec<usize>> = BTreeMap::new();
            for &i in pending.iter().filter(|i| !rejected.contains(i)) {
                groups
                    .entry(map.owner_of(&docs[i].shard_key()).clone())
                    .or_default()
                    .push(i);
            }
            let outcomes: Vec<(Vec<usize>, Result<Message>)> = thread::scope(|s| {
                let handles: Vec<_> = groups
                    .into_iter()
                    .map(|(shard, idxs)| {
                        let map = &map;
                        s.spawn(move || {
                            let sub: Vec<MetricDocument> = idxs.iter().map(|&i| docs[i].clone()).collect();
                            let reply = self.endpoint(map, &shard).and_then(|ep| {
                                self.pool.call(
                                    ep,
                                    Message::InsertBatch {
                                        collection: collection.to_string(),
                                        docs: sub,
                                        map_version: map.version,
                                        ordered: false,
                                    },
                                )
                            });
                            (idxs, reply)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("dispatch thread"))
                    .collect()
            });
            let mut retry = Vec::new();
            for (idxs, outcome) in outcomes {
                match outcome {
                    Ok(Message::InsertBatchResult { result: sub }) => {
                        reached += 1;
                        result.inserted_count += sub.inserted_count;
                        for e in sub.errors {
                            result.errors.push(InsertError {
                                batch_index: idxs[e.batch_index],
                                ..e
                            });
                        }
                    }
                    Ok(Message::StaleVersion { .. }) => {
                        reached += 1;
                        retry.extend(idxs);
                    }
                    Ok(other) => {
                        let e = Error::Protocol(format!("unexpected {}", other.type_name()));
                        idxs.iter().for_each(|&i| fail(&mut result, i, &e));
                    }
                    Err(e) => {
                        if matches!(e, Error::NodeDown(_) | Error::Timeout(_)) {
                            unreachable += 1;
                        } else {
                            reached += 1;
                        }
                        idxs.iter().for_each(|&i| fail(&mut result, i, &e));
                    }
                }
            }
            if retry.is_empty() {
                break;
            }
            if attempt == RETRY_BUDGET {
                let e = Error::Routing(format!("stale shard map after {RETRY_BUDGET} refreshes"));
                retry.iter().for_each(|&i| fail(&mut result, i, &e));
                break;
            }
            map = self.refresh_map(collection)?.0;
            retry.sort_unstable();
            pending = retry;
        }
        if reached == 0 && unreachable > 0 {
            return Err(Error::ClusterUnavailable(format!("no shard of {collection} reachable")));
        }
        result.errors.sort_by_key(|e| e.batch_index);
        Ok(result)
    }

    /// Conditional find over every shard that may hold matching documents.
    /// Pages are handed to `on_page` in arrival order; returns the total count.
    pub fn route_find(
        &self,
        collection: &str,
        filter: &Filter,
        mut on_page: impl FnMut(Vec<MetricDocument>) -> Result<()>,
    ) -> Result<u64> {
        filter.validate()?;
        let mut map = self.map(collection)?;
        for attempt in 0..=RETRY_BUDGET {
            match self.scatter_gather(collection, filter, &map, &mut on_page) {
                Err(Error::StaleVersion(_)) if attempt < RETRY_BUDGET => {
                    map = self.refresh_map(collection)?.0;
                }
                Err(Error::StaleVersion(m)) => return Err(Error::Routing(m)),
                other => return other,
            }
        }
        unreachable!()
    }

    /// Pages are held back until every target has answered at least once,
    /// so a `stale_version` can still abort the attempt before anything
    /// reaches the caller.
    fn scatter_gather(
        &self,
        collection: &str,
        filter: &Filter,
        map: &ShardMap,
        on_page: &mut impl FnMut(Vec<MetricDocument>) -> Result<()>,
    ) -> Result<u64> {
        let targets = map.target_shards(filter);
        let total = targets.len();
        let (tx, rx) = mpsc::sync_channel::<(usize, ShardEvent)>(2 * total.max(1));
        thread::scope(|s| {
            for (slot, shard) in targets.iter().enumerate() {
                let tx = tx.clone();
                s.spawn(move || {
                    let msg = Message::Find {
                        collection: collection.to_string(),
                        filter: filter.clone(),
                        map_version: map.version,
                    };
                    let res = self.endpoint(map, shard).and_then(|ep| {
                        self.pool.call_stream(ep, msg, |docs| {
                            tx.send((slot, ShardEvent::Page(docs)))
                                .map_err(|_| Error::Protocol("find aborted".into()))
                        })
                    });
                    let ev = match res {
                        Ok(_) => ShardEvent::Done,
                        Err(e) => ShardEvent::Failed(shard.clone(), e),
                    };
                    let _ = tx.send((slot, ev));
                });
            }
            drop(tx);
            let mut answered = vec![false; total];
            let mut held: Vec<Vec<MetricDocument>> = Vec::new();
            let mut released = total == 0;
            let mut count = 0u64;
            let outcome = (|| {
                for (slot, ev) in rx.iter() {
                    answered[slot] = true;
                    match ev {
                        ShardEvent::Page(docs) => {
                            count += docs.len() as u64;
                            if released {
                                on_page(docs)?;
                            } else {
                                held.push(docs);
                            }
                        }
                        ShardEvent::Done => {}
                        ShardEvent::Failed(_, e @ Error::StaleVersion(_)) if !released => return Err(e),
                        ShardEvent::Failed(shard, e) => {
                            return Err(Error::PartialResults {
                                shard: shard.to_string(),
                                reason: e.to_string(),
                            })
                        }
                    }
                    if !released && answered.iter().all(|a| *a) {
                        released = true;
                        for docs in held.drain(..) {
                            on_page(docs)?;
                        }
                    }
                }
                for docs in held.drain(..) {
                    on_page(docs)?;
                }
                Ok(count)
            })();
            // dropping the receiver unblocks any shard thread still sending
            drop(rx);
            outcome
        })
    }

    fn dispatch(&self, message: Message, out: &Responder) -> Result<Message> {
        match message {
            Message::Ping {} => Ok(Message::Pong {}),
            Message::Hello { .. } => Ok(Message::Hello {
                role: Some("router".into()),
                id: Some(self.opts.id.clone()),
                shards: None,
            }),
            Message::InsertBatch {
                collection,
                docs,
                ordered,
                ..
            } => self
                .route_insert_many(&collection, &docs, ordered)
                .map(|result| Message::InsertBatchResult { result }),
            Message::Find { collection, filter, .. } => {
                let count = self.route_find(&collection, &filter, |docs| out.send(Message::FindBatch { docs }))?;
                Ok(Message::EndOfResults { count })
            }
            Message::GetShardmap { collection, .. } => self
                .refresh_map(&collection)
                .map(|(map, _)| Message::Shardmap { map: (*map).clone() }),
            Message::Shutdown {} => {
                self.signal.trigger();
                Ok(Message::Ack {})
            }
            other => Err(Error::Protocol(format!("router does not handle {}", other.type_name()))),
        }
    }
}

impl Service for Router {
    fn handle(&self, req: Request, out: &Responder) {
        // clients need no token, but only the orchestrator may stop a router
        if matches!(req.message, Message::Shutdown {}) && req.cluster_token != self.opts.token {
            return out.reply(Err(Error::Auth));
        }
        out.reply(self.dispatch(req.message, out));
    }
}

pub struct RouterHandle {
    pub router: Arc<Router>,
    pub net: ServerHandle,
}

impl RouterHandle {
    /// Routers accept client envelopes without a cluster token.
    pub fn start(listener: TcpListener, opts: RouterOptions) -> Result<RouterHandle> {
        let router = Router::new(opts);
        let net = net::serve(listener, router.clone(), None, router.signal())?;
        Ok(RouterHandle { router, net })
    }

    pub fn endpoint(&self) -> String {
        self.net.endpoint()
    }

    pub fn stop(&mut self) {
        self.net.stop();
    }
}

/// Application-side client of one router.
pub struct RouterClient {
    conn: Connection,
}

impl RouterClient {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<RouterClient> {
        Ok(RouterClient {
            conn: Connection::connect(endpoint, "", timeout)?,
        })
    }

    pub fn endpoint(&self) -> &str {
        self.conn.endpoint()
    }

    pub fn ping(&mut self) -> Result<()> {
        match self.conn.call(Message::Ping {})? {
            Message::Pong {} => Ok(()),
            other => Err(Error::Protocol(format!("expected pong, got {}", other.type_name()))),
        }
    }

    pub fn insert_many(&mut self, collection: &str, docs: Vec<MetricDocument>) -> Result<InsertManyResult> {
        self.insert_many_mode(collection, docs, false)
    }

    pub fn insert_many_mode(
        &mut self,
        collection: &str,
        docs: Vec<MetricDocument>,
        ordered: bool,
    ) -> Result<InsertManyResult> {
        let msg = Message::InsertBatch {
            collection: collection.to_string(),
            docs,
            map_version: 0,
            ordered,
        };
        match self.conn.call(msg)? {
            Message::InsertBatchResult { result } => Ok(result),
            other => Err(Error::Protocol(format!("unexpected {}", other.type_name()))),
        }
    }

    pub fn find_each(
        &mut self,
        collection: &str,
        filter: &Filter,
        on_page: impl FnMut(Vec<MetricDocument>) -> Result<()>,
    ) -> Result<u64> {
        let msg = Message::Find {
            collection: collection.to_string(),
            filter: filter.clone(),
            map_version: 0,
        };
        self.conn.call_stream(msg, on_page)
    }

    pub fn find(&mut self, collection: &str, filter: &Filter) -> Result<Vec<MetricDocument>> {
        let mut out = Vec::new();
        self.find_each(collection, filter, |page| {
            out.extend(page);
            Ok(())
        })?;
        Ok(out)
    }

    /// Number of matching documents, without keeping them.
    pub fn find_count(&mut self, collection: &str, filter: &Filter) -> Result<u64> {
        let mut n = 0u64;
        self.find_each(collection, filter, |page| {
            n += page.len() as u64;
            Ok(())
        })?;
        Ok(n)
    }

    pub fn shardmap(&mut self, collection: &str) -> Result<ShardMap> {
        let msg = Message::GetShardmap {
            collection: collection.to_string(),
            known_version: 0,
        };
        match self.conn.call(msg)? {
            Message::Shardmap { map } => Ok(map),
            other => Err(Error::Protocol(format!("unexpected {}", other.type_name()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::{LocalCluster, LocalClusterOptions, METRICS_COLLECTION as C};
    use crate::model::{ShardKey, KEY_MIN};

    fn doc(n: u64, node: &str, ts: i64) -> MetricDocument {
        MetricDocument {
            doc_id: DocId::new(7, 0, n),
            node_id: node.into(),
            timestamp: ts,
            metrics: BTreeMap::from([("metric_00".to_string(), n as f64)]),
        }
    }

    /// Nodes n0..n9, one document per node per minute.
    fn grid(nodes: usize, minutes: i64) -> Vec<MetricDocument> {
        let mut out = Vec::new();
        for m in 0..minutes {
            for n in 0..nodes {
                out.push(doc(out.len() as u64, &format!("n{n}"), 60 * m));
            }
        }
        out
    }

    fn cluster(dir: &Path, shards: usize, split_threshold: u64) -> LocalCluster {
        let opts = LocalClusterOptions {
            shards,
            split_threshold,
            ..Default::default()
        };
        LocalCluster::start(dir, opts).unwrap()
    }

    use std::path::Path;

    fn manual_split(c: &LocalCluster, key: ShardKey) -> ShardMap {
        let map = c.config.server.get_shardmap(C, 0).unwrap().unwrap();
        let chunk = map.chunk_for(&key).chunk_id;
        c.config.server.report_split(C, chunk, &key).unwrap()
    }

    #[test]
    fn inserts_follow_chunk_owners() {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(dir.path(), 2, u64::MAX);
        let map = manual_split(&c, ShardKey::new("n5", 0));
        assert_eq!(map.chunks[0].owner_shard.as_str(), "shard-0");
        assert_eq!(map.chunks[1].owner_shard.as_str(), "shard-1");

        let docs = grid(10, 100);
        let mut client = c.client(0).unwrap();
        let res = client.insert_many(C, docs.clone()).unwrap();
        assert_eq!(res.inserted_count, 1000);
        assert!(res.errors.is_empty());
        // oracle: n0..n4 sort below ("n5", 0)
        let low = docs.iter().filter(|d| d.node_id.as_str() < "n5").count();
        assert_eq!(c.shards[0].server.live_doc_count(), low);
        assert_eq!(c.shards[1].server.live_doc_count(), 1000 - low);

        let one = client.find(C, &Filter::nodes_and_time(["n3"], 0, 59)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].node_id, "n3");
        assert_eq!(one[0].timestamp, 0);

        let window = Filter::nodes_and_time((0..10).map(|n| format!("n{n}")), 0, 60 * 60 - 1);
        assert_eq!(client.find_count(C, &window).unwrap(), 600);
        c.stop().unwrap();
    }

    #[test]
    fn duplicates_are_reported_by_index() {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(dir.path(), 2, u64::MAX);
        manual_split(&c, ShardKey::new("n5", 0));
        let mut client = c.client(0).unwrap();
        let docs = grid(10, 10);
        client.insert_many(C, docs[..50].to_vec()).unwrap();
        let res = client.insert_many(C, docs[45..].to_vec()).unwrap();
        assert_eq!(res.inserted_count, 50);
        let idx: Vec<usize> = res.errors.iter().map(|e| e.batch_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert!(res.errors.iter().all(|e| e.code == DUPLICATE_KEY));
        c.stop().unwrap();
    }

    #[test]
    fn duplicate_on_previous_holder_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(dir.path(), 2, u64::MAX);
        let mut client = c.client(0).unwrap();
        let first = doc(1, "n7", 0);
        assert_eq!(client.insert_many(C, vec![first.clone()]).unwrap().inserted_count, 1);
        // n7 now belongs to shard-1, but the document still lives on shard-0
        manual_split(&c, ShardKey::new("n5", 0));
        let res = client.insert_many(C, vec![first]).unwrap();
        assert_eq!(res.inserted_count, 0);
        assert_eq!(res.errors[0].code, DUPLICATE_KEY);
        assert_eq!(client.find_count(C, &Filter::nodes_and_time(["n7"], 0, 1)).unwrap(), 1);
        c.stop().unwrap();
    }

    #[test]
    fn stale_router_cache_recovers() {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(dir.path(), 2, u64::MAX);
        let router = &c.routers[0].router;
        let before = router.refresh_map(C).unwrap().0;
        assert_eq!(before.chunks.len(), 1);
        let after = manual_split(&c, ShardKey::new("n5", 0));
        // shard-0 learns the new epoch from an up-to-date peer router
        c.shards[0]
            .server
            .insert_batch(C, &[doc(0, "n0", 0)], after.version)
            .unwrap();

        assert_eq!(router.cached(C).unwrap().map.version, before.version);
        let res = router
            .route_insert_many(C, &[doc(1, "n8", 0), doc(2, "n1", 0)], false)
            .unwrap();
        assert_eq!(res.inserted_count, 2);
        assert_eq!(router.cached(C).unwrap().map.version, after.version);
        assert_eq!(c.shards[1].server.live_doc_count(), 1);

        let (_, outcome) = router.refresh_map(C).unwrap();
        assert_eq!(outcome, Refresh::NotModified);
        c.stop().unwrap();
    }

    #[test]
    fn stale_find_is_retried_not_partial() {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(dir.path(), 2, u64::MAX);
        let router = &c.routers[0].router;
        router.route_insert_many(C, &grid(10, 3), false).unwrap();
        router.refresh_map(C).unwrap();
        let after = manual_split(&c, ShardKey::new("n5", 0));
        c.shards[0]
            .server
            .insert_batch(C, &[doc(99, "n0", 600)], after.version)
            .unwrap();
        let mut got = 0;
        let n = router
            .route_find(C, &Filter::nodes_and_time(["n0", "n9"], 0, 601), |p| {
                got += p.len();
                Ok(())
            })
            .unwrap();
        assert_eq!((n, got), (7, 7));
        assert_eq!(router.cached(C).unwrap().map.version, after.version);
        c.stop().unwrap();
    }

    #[test]
    fn malformed_filters_and_ordered_mode() {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(dir.path(), 2, u64::MAX);
        let mut client = c.client(0).unwrap();
        let zero_width = Filter::nodes_and_time(["n0"], 60, 59);
        assert!(matches!(client.find(C, &zero_width), Err(Error::MalformedFilter(_))));
        assert!(matches!(
            client.find(C, &Filter::default()),
            Err(Error::MalformedFilter(_))
        ));
        assert!(matches!(
            client.insert_many_mode(C, vec![doc(0, "n0", 0)], true),
            Err(Error::UnsupportedMode)
        ));
        assert!(matches!(client.find(C, &Filter::nodes_and_time(["n0"], 0, 1)), Ok(v) if v.is_empty()));
        c.stop().unwrap();
    }

    #[test]
    fn refresh_without_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cluster(dir.path(), 1, u64::MAX);
        let router = c.routers[0].router.clone();
        let cached = router.refresh_map(C).unwrap().0;
        c.config.stop().unwrap();
        assert!(matches!(router.refresh_map(C), Err(Error::MetadataUnavailable(_))));
        // the cached map keeps serving traffic
        assert_eq!(router.cached(C).unwrap().map.version, cached.version);
        let res = router.route_insert_many(C, &[doc(0, "n0", 0)], false).unwrap();
        assert_eq!(res.inserted_count, 1);
        for s in &mut c.shards {
            s.stop().unwrap();
        }
        for r in &mut c.routers {
            r.stop();
        }
    }

    #[test]
    fn unreachable_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cluster(dir.path(), 2, u64::MAX);
        manual_split(&c, ShardKey::new("n5", 0));
        let router = c.routers[0].router.clone();
        router.refresh_map(C).unwrap();
        c.shards[1].stop().unwrap();
        let res = router
            .route_insert_many(C, &[doc(0, "n0", 0), doc(1, "n9", 0)], false)
            .unwrap();
        assert_eq!(res.inserted_count, 1);
        assert_eq!(res.errors.len(), 1);
        assert_eq!(res.errors[0].batch_index, 1);
        let err = router
            .route_find(C, &Filter::nodes_and_time(["n0", "n9"], 0, 60), |_| Ok(()))
            .unwrap_err();
        assert!(
            matches!(err, Error::PartialResults { ref shard, .. } if shard == "shard-1"),
            "{err}"
        );
        c.shards[0].stop().unwrap();
        assert!(matches!(
            router.route_insert_many(C, &[doc(2, "n0", 0)], false),
            Err(Error::ClusterUnavailable(_))
        ));
        c.config.stop().unwrap();
    }

    #[test]
    fn concurrent_clients_with_splits() {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(dir.path(), 2, 500);
        let eps = c.router_endpoints();
        thread::scope(|s| {
            for t in 0..4u32 {
                let ep = eps[0].clone();
                s.spawn(move || {
                    let mut client = RouterClient::connect(&ep, Duration::from_secs(10)).unwrap();
                    for b in 0..10i64 {
                        let docs: Vec<_> = (0..100)
                            .map(|i| MetricDocument {
                                doc_id: DocId::new(t, 0, (b * 100 + i) as u64),
                                node_id: format!("nid{:03}", i % 20 + 20 * t as i64),
                                timestamp: 60 * (b * 5 + i / 20),
                                metrics: BTreeMap::from([("metric_00".into(), 1.0)]),
                            })
                            .collect();
                        let r = client.insert_many(C, docs).unwrap();
                        assert_eq!(r.inserted_count, 100, "{:?}", r.errors.first());
                    }
                });
            }
        });
        let map = c.config.server.get_shardmap(C, 0).unwrap().unwrap();
        assert!(map.chunks.len() > 2, "expected splits, got {}", map.chunks.len());
        map.validate().unwrap();
        assert_eq!(map.chunks[0].lo, KEY_MIN);
        let total: usize = c.shards.iter().map(|s| s.server.live_doc_count()).sum();
        assert_eq!(total, 4000);
        let all = Filter {
            ts_lo: Some(0),
            ..Default::default()
        };
        assert_eq!(c.client(0).unwrap().find_count(C, &all).unwrap(), 4000);
        c.stop().unwrap();
    }
}
