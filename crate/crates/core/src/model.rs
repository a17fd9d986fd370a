//! Document model, shard keys, filters and cluster metadata types.
//!
//! Every type here is a plain immutable value; the server components share
//! them freely across threads.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Opaque 16-byte document identifier.
///
/// Layout: 4-byte client id, then a 96-bit per-client counter split into a
/// 4-byte high word and an 8-byte low word, all big-endian.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DocId(pub [u8; 16]);

impl DocId {
    pub fn new(client_id: u32, counter_hi: u32, counter_lo: u64) -> Self {
        let mut b = [0u8; 16];
        b[..4].copy_from_slice(&client_id.to_be_bytes());
        b[4..8].copy_from_slice(&counter_hi.to_be_bytes());
        b[8..].copy_from_slice(&counter_lo.to_be_bytes());
        DocId(b)
    }

    pub fn client_id(&self) -> u32 {
        u32::from_be_bytes(self.0[..4].try_into().unwrap())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for DocId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut b = [0u8; 16];
        hex::decode_to_slice(s, &mut b).map_err(|e| Error::InvalidArgument(format!("bad doc_id {s:?}: {e}")))?;
        Ok(DocId(b))
    }
}

impl fmt::Debug for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DocId({})", self.to_hex())
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for DocId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for DocId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Client-side generator of coordination-free unique ids.
#[derive(Debug, Clone)]
pub struct DocIdGenerator {
    client_id: u32,
    counter: u128,
}

impl DocIdGenerator {
    pub fn new(client_id: u32) -> Self {
        Self { client_id, counter: 0 }
    }

    pub fn next_id(&mut self) -> DocId {
        let c = self.counter;
        self.counter += 1;
        DocId::new(self.client_id, (c >> 64) as u32, c as u64)
    }
}

/// One per-node, per-minute sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDocument {
    pub doc_id: DocId,
    pub node_id: String,
    pub timestamp: i64,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricDocument {
    pub fn shard_key(&self) -> ShardKey {
        ShardKey::new(self.node_id.clone(), self.timestamp)
    }
}

/// Compound range-partitioning key `(node_id, timestamp)` with sentinels.
///
/// Variant order gives `Min < Key(..) < Max`; concrete keys compare by
/// node id bytes, then timestamp.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardKey {
    Min,
    Key { node_id: String, timestamp: i64 },
    Max,
}

pub const KEY_MIN: ShardKey = ShardKey::Min;
pub const KEY_MAX: ShardKey = ShardKey::Max;

impl ShardKey {
    pub fn new(node_id: impl Into<String>, timestamp: i64) -> Self {
        ShardKey::Key {
            node_id: node_id.into(),
            timestamp,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        !matches!(self, ShardKey::Key { .. })
    }
}

impl fmt::Display for ShardKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShardKey::Min => f.write_str("KEY_MIN"),
            ShardKey::Max => f.write_str("KEY_MAX"),
            ShardKey::Key { node_id, timestamp } => write!(f, "({node_id:?}, {timestamp})"),
        }
    }
}

pub fn compare_keys(a: &ShardKey, b: &ShardKey) -> Ordering {
    a.cmp(b)
}

pub fn key_in_range(k: &ShardKey, r: &ChunkRange) -> bool {
    r.lo <= *k && *k < r.hi
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShardId(pub String);

impl ShardId {
    pub fn new(s: impl Into<String>) -> Self {
        ShardId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Half-open key range `[lo, hi)` owned by one shard.
///
/// `holders` lists every shard that may store documents in this range: the
/// current owner plus any earlier owner, since splits never move data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRange {
    pub chunk_id: u64,
    pub lo: ShardKey,
    pub hi: ShardKey,
    pub owner_shard: ShardId,
    pub approx_doc_count: u64,
    #[serde(default)]
    pub holders: BTreeSet<ShardId>,
}

impl ChunkRange {
    pub fn contains(&self, k: &ShardKey) -> bool {
        key_in_range(k, self)
    }

    /// True when the closed key interval `[min, max]` overlaps this chunk.
    pub fn intersects_closed(&self, min: &ShardKey, max: &ShardKey) -> bool {
        self.lo <= *max && *min < self.hi
    }
}

/// Routing metadata of one collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardMap {
    pub version: u64,
    pub collection: String,
    pub chunks: Vec<ChunkRange>,
    pub shard_endpoints: BTreeMap<ShardId, String>,
    pub index_fields: Vec<String>,
}

impl ShardMap {
    /// Checks contiguity, full coverage, non-empty ranges and owner registration.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(format!("{}: {m}", self.collection)));
        let (Some(first), Some(last)) = (self.chunks.first(), self.chunks.last()) else {
            return bad("shard map has no chunks".into());
        };
        if first.lo != KEY_MIN {
            return bad(format!("first chunk starts at {}", first.lo));
        }
        if last.hi != KEY_MAX {
            return bad(format!("last chunk ends at {}", last.hi));
        }
        for c in &self.chunks {
            if c.lo >= c.hi {
                return bad(format!("chunk {} is empty: [{}, {})", c.chunk_id, c.lo, c.hi));
            }
            if !self.shard_endpoints.contains_key(&c.owner_shard) {
                return bad(format!("owner {} of chunk {} unregistered", c.owner_shard, c.chunk_id));
            }
        }
        for w in self.chunks.windows(2) {
            if w[0].hi != w[1].lo {
                return bad(format!(
                    "gap or overlap between chunk {} and {}",
                    w[0].chunk_id, w[1].chunk_id
                ));
            }
        }
        Ok(())
    }

    /// Index of the chunk containing `k`. Requires a valid map.
    pub fn chunk_index_for(&self, k: &ShardKey) -> usize {
        // first chunk whose hi > k
        self.chunks.partition_point(|c| c.hi <= *k)
    }

    pub fn chunk_for(&self, k: &ShardKey) -> &ChunkRange {
        &self.chunks[self.chunk_index_for(k)]
    }

    pub fn chunk_by_id(&self, chunk_id: u64) -> Option<&ChunkRange> {
        self.chunks.iter().find(|c| c.chunk_id == chunk_id)
    }

    pub fn owner_of(&self, k: &ShardKey) -> &ShardId {
        &self.chunk_for(k).owner_shard
    }

    pub fn chunk_counts(&self) -> BTreeMap<ShardId, usize> {
        let mut counts: BTreeMap<ShardId, usize> = self.shard_endpoints.keys().map(|s| (s.clone(), 0)).collect();
        for c in &self.chunks {
            *counts.entry(c.owner_shard.clone()).or_default() += 1;
        }
        counts
    }

    /// Every shard that has ever owned part of this collection.
    pub fn all_holders(&self) -> BTreeSet<ShardId> {
        self.chunks
            .iter()
            .flat_map(|c| c.holders.iter().chain(std::iter::once(&c.owner_shard)))
            .cloned()
            .collect()
    }

    /// Shards a find with `filter` must visit.
    ///
    /// With a node-id clause the filter is a union of key rectangles and only
    /// the holders of intersecting chunks are targeted; otherwise every
    /// historical holder is.
    pub fn target_shards(&self, filter: &Filter) -> BTreeSet<ShardId> {
        let Some(nodes) = &filter.node_ids else {
            return self.all_holders();
        };
        let ts_min = filter.ts_lo.unwrap_or(i64::MIN);
        let ts_max = filter.ts_hi.map(|h| h - 1).unwrap_or(i64::MAX);
        let mut out = BTreeSet::new();
        for node in nodes {
            let min = ShardKey::new(node.clone(), ts_min);
            let max = ShardKey::new(node.clone(), ts_max);
            let start = self.chunk_index_for(&min);
            for c in &self.chunks[start..] {
                if !c.intersects_closed(&min, &max) {
                    break;
                }
                out.insert(c.owner_shard.clone());
                out.extend(c.holders.iter().cloned());
            }
        }
        out
    }
}

/// Conjunctive filter over the indexed fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_ids: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_lo: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_hi: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<DocId>,
}

impl Filter {
    pub fn nodes_and_time<I, S>(nodes: I, ts_lo: i64, ts_hi: i64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Filter {
            node_ids: Some(nodes.into_iter().map(Into::into).collect()),
            ts_lo: Some(ts_lo),
            ts_hi: Some(ts_hi),
            doc_id: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_ids.is_none() && self.ts_lo.is_none() && self.ts_hi.is_none() && self.doc_id.is_none() {
            return Err(Error::MalformedFilter("filter has no clauses".into()));
        }
        if matches!(&self.node_ids, Some(s) if s.is_empty()) {
            return Err(Error::MalformedFilter("node_ids clause is empty".into()));
        }
        if let (Some(lo), Some(hi)) = (self.ts_lo, self.ts_hi) {
            if lo >= hi {
                return Err(Error::MalformedFilter(format!("empty time range [{lo}, {hi})")));
            }
        }
        Ok(())
    }

    pub fn matches_fields(&self, doc_id: &DocId, node_id: &str, timestamp: i64) -> bool {
        if let Some(nodes) = &self.node_ids {
            if !nodes.contains(node_id) {
                return false;
            }
        }
        if matches!(self.ts_lo, Some(lo) if timestamp < lo) {
            return false;
        }
        if matches!(self.ts_hi, Some(hi) if timestamp >= hi) {
            return false;
        }
        if matches!(&self.doc_id, Some(id) if id != doc_id) {
            return false;
        }
        true
    }
}

pub fn matches(doc: &MetricDocument, f: &Filter) -> bool {
    f.matches_fields(&doc.doc_id, &doc.node_id, doc.timestamp)
}

/// Fields a shard can maintain a secondary index on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexField {
    Timestamp,
    NodeId,
    DocId,
}

impl IndexField {
    pub fn as_str(&self) -> &'static str {
        match self {
            IndexField::Timestamp => "timestamp",
            IndexField::NodeId => "node_id",
            IndexField::DocId => "doc_id",
        }
    }
}

impl FromStr for IndexField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timestamp" => Ok(IndexField::Timestamp),
            "node_id" => Ok(IndexField::NodeId),
            "doc_id" => Ok(IndexField::DocId),
            other => Err(Error::InvalidArgument(format!(
                "cannot index field {other:?}; supported: timestamp, node_id, doc_id"
            ))),
        }
    }
}

/// Partition of a job's hosts into cluster roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub config_nodes: Vec<String>,
    pub shard_nodes: Vec<String>,
    pub router_nodes: Vec<String>,
    pub client_nodes: Vec<String>,
}

impl RoleAssignment {
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.config_nodes.len(),
            self.shard_nodes.len(),
            self.router_nodes.len(),
            self.client_nodes.len(),
        )
    }

    /// Hosts in role order: config, shards, routers, clients.
    pub fn all_hosts(&self) -> impl Iterator<Item = &String> {
        self.config_nodes
            .iter()
            .chain(&self.shard_nodes)
            .chain(&self.router_nodes)
            .chain(&self.client_nodes)
    }
}

/// Synthetic user-job metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub node_ids: BTreeSet<String>,
    pub start: i64,
    pub duration_minutes: u32,
}

impl JobRecord {
    pub fn end(&self) -> i64 {
        self.start + 60 * i64::from(self.duration_minutes)
    }

    pub fn filter(&self) -> Filter {
        Filter::nodes_and_time(self.node_ids.iter().cloned(), self.start, self.end())
    }

    /// Nodes times minutes: one sample per node per minute.
    pub fn expected_docs(&self) -> u64 {
        self.node_ids.len() as u64 * u64::from(self.duration_minutes)
    }

    pub fn is_valid(&self) -> bool {
        !self.node_ids.is_empty() && self.duration_minutes >= 1 && self.start % 60 == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertError {
    pub batch_index: usize,
    pub code: String,
    pub message: String,
}

/// Outcome of an unordered batch insert.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertManyResult {
    pub inserted_count: u64,
    pub errors: Vec<InsertError>,
}

impl InsertManyResult {
    pub fn duplicate_count(&self) -> usize {
        self.errors.iter().filter(|e| e.code == DUPLICATE_KEY).count()
    }
}

pub const DUPLICATE_KEY: &str = "duplicate_key";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chunk(id: u64, lo: ShardKey, hi: ShardKey) -> ChunkRange {
        ChunkRange {
            chunk_id: id,
            lo,
            hi,
            owner_shard: ShardId::new("s0"),
            approx_doc_count: 0,
            holders: BTreeSet::new(),
        }
    }

    fn doc(node: &str, ts: i64, n: u64) -> MetricDocument {
        MetricDocument {
            doc_id: DocId::new(1, 0, n),
            node_id: node.into(),
            timestamp: ts,
            metrics: BTreeMap::from([("m".to_string(), 1.0)]),
        }
    }

    #[test]
    fn key_ordering_examples() {
        let a = ShardKey::new("nid001", 60);
        assert_eq!(compare_keys(&a, &a.clone()), Ordering::Equal);
        assert_eq!(
            compare_keys(&ShardKey::new("nid001", 120), &ShardKey::new("nid002", 0)),
            Ordering::Less
        );
        assert_eq!(compare_keys(&KEY_MIN, &ShardKey::new("", 0)), Ordering::Less);
        assert_eq!(
            compare_keys(&KEY_MAX, &ShardKey::new("zzz", i64::MAX)),
            Ordering::Greater
        );
    }

    #[test]
    fn key_in_range_examples() {
        let universal = chunk(0, KEY_MIN, KEY_MAX);
        assert!(key_in_range(&ShardKey::new("a", 0), &universal));
        let r = chunk(1, ShardKey::new("a", 0), ShardKey::new("b", 0));
        assert!(!key_in_range(&r.hi.clone(), &r));
        assert!(key_in_range(&r.lo.clone(), &r));
    }

    #[test]
    fn random_keys_land_in_exactly_one_chunk() {
        let bounds = [
            KEY_MIN,
            ShardKey::new("n2", 0),
            ShardKey::new("n5", 3600),
            ShardKey::new("n7", 60),
            KEY_MAX,
        ];
        let chunks: Vec<_> = bounds
            .windows(2)
            .enumerate()
            .map(|(i, w)| chunk(i as u64, w[0].clone(), w[1].clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let k = ShardKey::new(format!("n{}", rng.gen_range(0..10)), rng.gen_range(0..7200));
            // brute-force membership count
            let hits = chunks.iter().filter(|c| key_in_range(&k, c)).count();
            assert_eq!(hits, 1, "{k}");
        }
    }

    #[test]
    fn filter_bounds() {
        let f = Filter::nodes_and_time(["n1"], 600, 660);
        assert!(matches(&doc("n1", 600, 0), &f));
        assert!(!matches(&doc("n1", 660, 0), &f));
        assert!(!matches(&doc("n2", 600, 0), &f));
    }

    #[test]
    fn filter_validation() {
        assert!(Filter::default().validate().is_err());
        assert!(Filter::nodes_and_time(["n"], 600, 600).validate().is_err());
        let empty = Filter {
            node_ids: Some(BTreeSet::new()),
            ..Default::default()
        };
        assert!(matches!(empty.validate(), Err(Error::MalformedFilter(_))));
    }

    #[test]
    fn random_filter_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let docs: Vec<_> = (0..1000)
            .map(|i| doc(&format!("n{}", rng.gen_range(0..8)), 60 * rng.gen_range(0..100), i))
            .collect();
        for _ in 0..50 {
            let nodes: BTreeSet<String> = (0..rng.gen_range(1..4))
                .map(|_| format!("n{}", rng.gen_range(0..8)))
                .collect();
            let lo = 60 * rng.gen_range(0..50);
            let hi = lo + 60 * rng.gen_range(1..50);
            let f = Filter::nodes_and_time(nodes.clone(), lo, hi);
            let got: Vec<_> = docs.iter().filter(|d| matches(d, &f)).map(|d| d.doc_id).collect();
            // independent scan applying each clause directly
            let mut want = Vec::new();
            for d in &docs {
                let node_ok = nodes.iter().any(|n| *n == d.node_id);
                let time_ok = lo <= d.timestamp && d.timestamp < hi;
                if node_ok && time_ok {
                    want.push(d.doc_id);
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn doc_id_layout_and_hex() {
        let id = DocId::new(0xAABBCCDD, 1, 2);
        assert_eq!(id.client_id(), 0xAABBCCDD);
        assert_eq!(id.to_hex(), "aabbccdd000000010000000000000002");
        assert_eq!(id.to_hex().parse::<DocId>().unwrap(), id);
        let mut g = DocIdGenerator::new(3);
        assert_ne!(g.next_id(), g.next_id());
    }

    #[test]
    fn target_shards_prunes_by_rectangle() {
        let mut map = ShardMap {
            version: 2,
            collection: "c".into(),
            chunks: vec![
                chunk(0, KEY_MIN, ShardKey::new("n5", 0)),
                chunk(1, ShardKey::new("n5", 0), KEY_MAX),
            ],
            shard_endpoints: BTreeMap::from([(ShardId::new("s0"), "a:1".into()), (ShardId::new("s1"), "b:1".into())]),
            index_fields: vec![],
        };
        map.chunks[1].owner_shard = ShardId::new("s1");
        map.validate().unwrap();
        let t = map.target_shards(&Filter::nodes_and_time(["n3"], 0, 60));
        assert_eq!(t, BTreeSet::from([ShardId::new("s0")]));
        let t = map.target_shards(&Filter::nodes_and_time(["n7"], 0, 60));
        assert_eq!(t, BTreeSet::from([ShardId::new("s1")]));
        map.chunks[1].holders.insert(ShardId::new("s0"));
        let t = map.target_shards(&Filter::nodes_and_time(["n7"], 0, 60));
        assert_eq!(t.len(), 2);
        let t = map.target_shards(&Filter {
            ts_lo: Some(0),
            ..Default::default()
        });
        assert_eq!(t.len(), 2);
    }

    fn arb_key() -> impl Strategy<Value = ShardKey> {
        prop_oneof![
            1 => Just(KEY_MIN),
            1 => Just(KEY_MAX),
            8 => ("[a-c]{0,3}", -5i64..5).prop_map(|(n, t)| ShardKey::new(n, t)),
        ]
    }

    proptest! {
        #[test]
        fn key_order_is_total(a in arb_key(), b in arb_key(), c in arb_key()) {
            let ab = compare_keys(&a, &b);
            prop_assert_eq!(ab, compare_keys(&b, &a).reverse());
            prop_assert_eq!(ab == Ordering::Equal, a == b);
            if ab != Ordering::Greater && compare_keys(&b, &c) != Ordering::Greater {
                prop_assert_ne!(compare_keys(&a, &c), Ordering::Greater);
            }
            if let (ShardKey::Key { node_id: na, timestamp: ta }, ShardKey::Key { node_id: nb, timestamp: tb }) = (&a, &b) {
                let lex = na.as_bytes().cmp(nb.as_bytes()).then(ta.cmp(tb));
                prop_assert_eq!(ab, lex);
            }
        }

        #[test]
        fn matches_agrees_with_interval_reading(
            node in "[a-d]",
            ts in -20i64..120,
            nodes in proptest::option::of(proptest::collection::btree_set("[a-c]", 1..3)),
            lo in proptest::option::of(0i64..100),
            hi in proptest::option::of(0i64..100),
        ) {
            let d = doc(&node, ts, 0);
            let f = Filter { node_ids: nodes.clone(), ts_lo: lo, ts_hi: hi, doc_id: None };
            let in_nodes = nodes.map_or(true, |s| s.contains(&node));
            let in_time = lo.map_or(true, |l| l <= ts) && hi.map_or(true, |h| ts < h);
            prop_assert_eq!(matches(&d, &f), in_nodes && in_time);
        }
    }
}
