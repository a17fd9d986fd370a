//! Append-only segment storage with in-memory secondary indexes.
//!
//! Layout of a shard data directory:
//!
//! ```text
//! <dir>/MANIFEST      one JSON object: collection, index fields, sealed segments
//! <dir>/seg-<n>.log   records: u32 BE body length, u32 BE crc32, JSON body
//! ```
//!
//! Indexes are not persisted; [`SegmentStore::open`] rebuilds them by
//! scanning every segment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::ops::Bound;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ChunkRange, DocId, Filter, IndexField, InsertError, InsertManyResult, MetricDocument, ShardKey, DUPLICATE_KEY,
};

pub const MANIFEST_FILE: &str = "MANIFEST";
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;
const RECORD_HEADER: usize = 8;

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub segment_max_bytes: u64,
    /// fsync after every batch; acknowledgments wait for it.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            segment_max_bytes: DEFAULT_SEGMENT_BYTES,
            sync: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub collection: Option<String>,
    pub index_fields: Vec<String>,
    pub sealed_segments: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecoveryReport {
    pub records: usize,
    pub segments: usize,
    /// Bytes cut from the end of the final segment.
    pub truncated_bytes: u64,
}

#[derive(Debug, Clone)]
struct RecordMeta {
    doc_id: DocId,
    node_id: Arc<str>,
    timestamp: i64,
    segment: u32,
    offset: u64,
    len: u32,
}

/// Where a record's JSON body lives; valid after the store lock is released.
#[derive(Clone)]
pub struct Locator {
    file: Arc<File>,
    offset: u64,
    len: u32,
}

impl Locator {
    pub fn read(&self) -> Result<MetricDocument> {
        let mut buf = vec![0u8; self.len as usize];
        self.file.read_exact_at(&mut buf, self.offset + RECORD_HEADER as u64)?;
        serde_json::from_slice(&buf).map_err(|e| Error::Storage(format!("bad record: {e}")))
    }
}

#[derive(Debug)]
enum SecondaryIndex {
    Timestamp(BTreeMap<i64, Vec<u32>>),
    NodeId(BTreeMap<Arc<str>, Vec<u32>>),
    DocId(BTreeMap<DocId, u32>),
}

impl SecondaryIndex {
    fn new(field: IndexField) -> Self {
        match field {
            IndexField::Timestamp => SecondaryIndex::Timestamp(BTreeMap::new()),
            IndexField::NodeId => SecondaryIndex::NodeId(BTreeMap::new()),
            IndexField::DocId => SecondaryIndex::DocId(BTreeMap::new()),
        }
    }

    fn insert(&mut self, rec: u32, m: &RecordMeta) {
        match self {
            SecondaryIndex::Timestamp(ix) => ix.entry(m.timestamp).or_default().push(rec),
            SecondaryIndex::NodeId(ix) => ix.entry(m.node_id.clone()).or_default().push(rec),
            SecondaryIndex::DocId(ix) => {
                ix.insert(m.doc_id, rec);
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            SecondaryIndex::Timestamp(ix) => ix.values().map(Vec::len).sum(),
            SecondaryIndex::NodeId(ix) => ix.values().map(Vec::len).sum(),
            SecondaryIndex::DocId(ix) => ix.len(),
        }
    }
}

struct ActiveSegment {
    number: u32,
    file: File,
    len: u64,
}

pub struct SegmentStore {
    dir: PathBuf,
    opts: StoreOptions,
    manifest: Manifest,
    readers: Vec<Arc<File>>,
    active: Option<ActiveSegment>,
    records: Vec<RecordMeta>,
    primary: HashMap<DocId, u32>,
    by_key: BTreeMap<(Arc<str>, i64), u32>,
    node_names: HashMap<String, Arc<str>>,
    indexes: BTreeMap<IndexField, SecondaryIndex>,
}

fn segment_path(dir: &Path, n: u32) -> PathBuf {
    dir.join(format!("seg-{n}.log"))
}

fn list_segments(dir: &Path) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name
            .strip_prefix("seg-")
            .and_then(|s| s.strip_suffix(".log"))
            .and_then(|s| s.parse().ok())
        {
            out.push(n);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn key_bound(k: &ShardKey, inclusive: bool) -> Bound<(Arc<str>, i64)> {
    match k {
        ShardKey::Min | ShardKey::Max => Bound::Unbounded,
        ShardKey::Key { node_id, timestamp } => {
            let v = (Arc::from(node_id.as_str()), *timestamp);
            if inclusive {
                Bound::Included(v)
            } else {
                Bound::Excluded(v)
            }
        }
    }
}

impl SegmentStore {
    /// Opens or recovers the store in `dir`.
    ///
    /// A torn record at the tail of the final segment is cut off and
    /// reported; any other damage is a fatal [`Error::Recovery`].
    pub fn open(dir: &Path, opts: StoreOptions) -> Result<(SegmentStore, RecoveryReport)> {
        fs::create_dir_all(dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = if manifest_path.exists() {
            serde_json::from_slice(&fs::read(&manifest_path)?)
                .map_err(|e| Error::Recovery(format!("{}: {e}", manifest_path.display())))?
        } else {
            Manifest::default()
        };
        let mut store = SegmentStore {
            dir: dir.to_path_buf(),
            opts,
            manifest: Manifest::default(),
            readers: Vec::new(),
            active: None,
            records: Vec::new(),
            primary: HashMap::new(),
            by_key: BTreeMap::new(),
            node_names: HashMap::new(),
            indexes: BTreeMap::new(),
        };
        let mut report = RecoveryReport::default();
        let segments = list_segments(dir)?;
        for (pos, &n) in segments.iter().enumerate() {
            if n as usize != pos {
                return Err(Error::Recovery(format!("segment seg-{pos}.log is missing")));
            }
            let is_last = pos + 1 == segments.len();
            report.truncated_bytes += store.load_segment(n, is_last)?;
            report.segments += 1;
        }
        report.records = store.records.len();
        for f in &manifest.index_fields {
            store.build_index(f.parse()?);
        }
        store.manifest = manifest;
        let next = segments.last().copied();
        match next {
            Some(n) if !store.manifest.sealed_segments.contains(&n) => store.open_active(n)?,
            Some(n) => store.open_active(n + 1)?,
            None => {}
        }
        if report.truncated_bytes > 0 {
            log::warn!(
                "{}: truncated {} bytes of torn record at segment tail",
                dir.display(),
                report.truncated_bytes
            );
        }
        Ok((store, report))
    }

    /// Loads every record of segment `n`; returns bytes truncated.
    fn load_segment(&mut self, n: u32, is_last: bool) -> Result<u64> {
        let path = segment_path(&self.dir, n);
        let data = fs::read(&path)?;
        let file_len = data.len();
        let mut off = 0usize;
        let mut torn_at = None;
        while off < file_len {
            let fail = |why: &str| Error::Recovery(format!("{} at offset {off}: {why}", path.display()));
            if file_len - off < RECORD_HEADER {
                if is_last {
                    torn_at = Some(off);
                    break;
                }
                return Err(fail("truncated header"));
            }
            let len = u32::from_be_bytes(data[off..off + 4].try_into().unwrap()) as usize;
            let crc = u32::from_be_bytes(data[off + 4..off + 8].try_into().unwrap());
            let end = off + RECORD_HEADER + len;
            if end > file_len {
                if is_last {
                    torn_at = Some(off);
                    break;
                }
                return Err(fail("record runs past end of segment"));
            }
            let body = &data[off + RECORD_HEADER..end];
            let parsed = if crc32fast::hash(body) == crc {
                serde_json::from_slice::<MetricDocument>(body).ok()
            } else {
                None
            };
            let Some(doc) = parsed else {
                if is_last && end == file_len {
                    torn_at = Some(off);
                    break;
                }
                return Err(fail("corrupt record"));
            };
            self.index_record(&doc, n, off as u64, len as u32);
            off = end;
        }
        let file = if let Some(at) = torn_at {
            let f = OpenOptions::new().read(true).write(true).open(&path)?;
            f.set_len(at as u64)?;
            f.sync_all()?;
            f
        } else {
            File::open(&path)?
        };
        self.readers.push(Arc::new(file));
        Ok(torn_at.map_or(0, |at| (file_len - at) as u64))
    }

    fn open_active(&mut self, n: u32) -> Result<()> {
        let path = segment_path(&self.dir, n);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = file.metadata()?.len();
        if self.readers.len() == n as usize {
            self.readers.push(Arc::new(File::open(&path)?));
        }
        self.active = Some(ActiveSegment { number: n, file, len });
        Ok(())
    }

    fn intern(&mut self, node: &str) -> Arc<str> {
        if let Some(a) = self.node_names.get(node) {
            return a.clone();
        }
        let a: Arc<str> = Arc::from(node);
        self.node_names.insert(node.to_string(), a.clone());
        a
    }

    fn index_record(&mut self, doc: &MetricDocument, segment: u32, offset: u64, len: u32) {
        let node_id = self.intern(&doc.node_id);
        let rec = self.records.len() as u32;
        let meta = RecordMeta {
            doc_id: doc.doc_id,
            node_id: node_id.clone(),
            timestamp: doc.timestamp,
            segment,
            offset,
            len,
        };
        for ix in self.indexes.values_mut() {
            ix.insert(rec, &meta);
        }
        self.primary.insert(doc.doc_id, rec);
        *self.by_key.entry((node_id, doc.timestamp)).or_default() += 1;
        self.records.push(meta);
    }

    fn write_manifest(&self) -> Result<()> {
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&self.manifest).expect("manifest serializes"))?;
            f.sync_all()?;
        }
        fs::rename(tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn collection(&self) -> Option<&str> {
        self.manifest.collection.as_deref()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn live_doc_count(&self) -> usize {
        self.records.len()
    }

    pub fn segment_count(&self) -> usize {
        self.readers.len()
    }

    /// Declares the store's collection (one per shard directory) and its indexes.
    pub fn ensure_collection(&mut self, name: &str, index_fields: &[String]) -> Result<()> {
        match self.manifest.collection.as_deref() {
            Some(existing) if existing != name => {
                return Err(Error::Conflict(format!(
                    "{} already holds collection {existing}",
                    self.dir.display()
                )))
            }
            Some(_) => {}
            None => {
                self.manifest.collection = Some(name.to_string());
                self.write_manifest()?;
            }
        }
        for f in index_fields {
            self.create_index(f)?;
        }
        Ok(())
    }

    pub fn create_index(&mut self, field: &str) -> Result<()> {
        let f: IndexField = field.parse()?;
        if self.indexes.contains_key(&f) {
            return Ok(());
        }
        self.build_index(f);
        self.manifest.index_fields.push(f.as_str().to_string());
        self.write_manifest()
    }

    fn build_index(&mut self, f: IndexField) {
        let mut ix = SecondaryIndex::new(f);
        for (i, m) in self.records.iter().enumerate() {
            ix.insert(i as u32, m);
        }
        self.indexes.insert(f, ix);
    }

    /// Number of locators held by the index on `field`, if declared.
    pub fn index_len(&self, field: IndexField) -> Option<usize> {
        self.indexes.get(&field).map(SecondaryIndex::len)
    }

    fn seal_active(&mut self) -> Result<()> {
        let Some(active) = self.active.take() else {
            return Ok(());
        };
        active.file.sync_all()?;
        self.manifest.sealed_segments.push(active.number);
        self.write_manifest()?;
        self.open_active(active.number + 1)
    }

    /// Unordered insert: every new doc id is appended, duplicates (against
    /// stored documents or earlier entries of the same batch) become
    /// per-document errors. Returns after the appended records are flushed.
    pub fn insert_batch(&mut self, docs: &[MetricDocument]) -> Result<InsertManyResult> {
        let mut result = InsertManyResult::default();
        if self.active.is_none() {
            self.open_active(self.readers.len() as u32)?;
        }
        let mut seen = HashSet::new();
        let mut pending: Vec<(usize, u32, u64, u32)> = Vec::new(); // (batch idx, seg, off, len)
        let mut buf: Vec<u8> = Vec::new();
        for (i, doc) in docs.iter().enumerate() {
            if self.primary.contains_key(&doc.doc_id) || !seen.insert(doc.doc_id) {
                result.errors.push(InsertError {
                    batch_index: i,
                    code: DUPLICATE_KEY.into(),
                    message: format!("duplicate doc_id {}", doc.doc_id),
                });
                continue;
            }
            if doc.metrics.is_empty() {
                result.errors.push(InsertError {
                    batch_index: i,
                    code: "invalid_document".into(),
                    message: "metrics map is empty".into(),
                });
                continue;
            }
            let body = serde_json::to_vec(doc).map_err(|e| Error::Storage(e.to_string()))?;
            let rec_len = (RECORD_HEADER + body.len()) as u64;
            let active = self.active.as_ref().unwrap();
            if active.len + buf.len() as u64 > 0
                && active.len + buf.len() as u64 + rec_len > self.opts.segment_max_bytes
            {
                self.flush_buf(&mut buf)?;
                self.seal_active()?;
            }
            let active = self.active.as_ref().unwrap();
            let offset = active.len + buf.len() as u64;
            buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
            buf.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
            buf.extend_from_slice(&body);
            pending.push((i, active.number, offset, body.len() as u32));
        }
        self.flush_buf(&mut buf)?;
        if self.opts.sync && !pending.is_empty() {
            self.active.as_ref().unwrap().file.sync_data()?;
        }
        for (i, seg, off, len) in pending {
            self.index_record(&docs[i], seg, off, len);
            result.inserted_count += 1;
        }
        result.errors.sort_by_key(|e| e.batch_index);
        Ok(result)
    }

    fn flush_buf(&mut self, buf: &mut Vec<u8>) -> Result<()> {
        if buf.is_empty() {
            return Ok(());
        }
        let active = self.active.as_mut().unwrap();
        active.file.write_all(buf).map_err(|e| {
            if e.raw_os_error() == Some(libc::ENOSPC) {
                Error::Storage(format!("disk full writing {}", self.dir.display()))
            } else {
                Error::Io(e)
            }
        })?;
        active.len += buf.len() as u64;
        buf.clear();
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        if let Some(a) = &self.active {
            a.file.sync_all()?;
        }
        Ok(())
    }

    pub fn contains(&self, id: &DocId) -> bool {
        self.primary.contains_key(id)
    }

    pub fn existing(&self, ids: &[DocId]) -> Vec<DocId> {
        ids.iter().filter(|id| self.primary.contains_key(id)).copied().collect()
    }

    fn candidates(&self, filter: &Filter) -> Vec<u32> {
        if let (Some(nodes), Some(SecondaryIndex::NodeId(ix))) =
            (&filter.node_ids, self.indexes.get(&IndexField::NodeId))
        {
            return nodes
                .iter()
                .filter_map(|n| ix.get(n.as_str()))
                .flatten()
                .copied()
                .collect();
        }
        if filter.ts_lo.is_some() || filter.ts_hi.is_some() {
            if let Some(SecondaryIndex::Timestamp(ix)) = self.indexes.get(&IndexField::Timestamp) {
                let lo = filter.ts_lo.map_or(Bound::Unbounded, Bound::Included);
                let hi = filter.ts_hi.map_or(Bound::Unbounded, Bound::Excluded);
                return ix.range((lo, hi)).flat_map(|(_, v)| v).copied().collect();
            }
        }
        if let Some(id) = &filter.doc_id {
            return self.primary.get(id).copied().into_iter().collect();
        }
        (0..self.records.len() as u32).collect()
    }

    /// Locators of every stored document matching `filter`.
    pub fn locate(&self, filter: &Filter) -> Result<Vec<Locator>> {
        filter.validate()?;
        Ok(self
            .candidates(filter)
            .into_iter()
            .map(|r| &self.records[r as usize])
            .filter(|m| filter.matches_fields(&m.doc_id, &m.node_id, m.timestamp))
            .map(|m| Locator {
                file: self.readers[m.segment as usize].clone(),
                offset: m.offset,
                len: m.len,
            })
            .collect())
    }

    pub fn find(&self, filter: &Filter) -> Result<Vec<MetricDocument>> {
        self.locate(filter)?.iter().map(Locator::read).collect()
    }

    /// Number of stored documents whose shard key falls in `chunk`.
    pub fn count_in_range(&self, chunk: &ChunkRange) -> u64 {
        self.by_key
            .range((key_bound(&chunk.lo, true), key_bound(&chunk.hi, false)))
            .map(|(_, n)| u64::from(*n))
            .sum()
    }

    /// Median shard key of the documents in `chunk` when there are more
    /// than `threshold` of them, chosen so both halves are non-empty.
    pub fn split_candidate(&self, chunk: &ChunkRange, threshold: u64) -> Option<ShardKey> {
        let range = || {
            self.by_key
                .range((key_bound(&chunk.lo, true), key_bound(&chunk.hi, false)))
        };
        let total: u64 = range().map(|(_, n)| u64::from(*n)).sum();
        if total <= threshold {
            return None;
        }
        let mid = total / 2;
        let mut below = 0u64;
        let mut median_in_first = false;
        for (i, ((node, ts), n)) in range().enumerate() {
            let n = u64::from(*n);
            if i > 0 && (median_in_first || below + n > mid) {
                return Some(ShardKey::new(node.to_string(), *ts));
            }
            // splitting at the first key would leave the lower half empty
            if i == 0 && n > mid {
                median_in_first = true;
            }
            below += n;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ShardId, KEY_MAX, KEY_MIN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn doc(node: &str, ts: i64, n: u64) -> MetricDocument {
        MetricDocument {
            doc_id: DocId::new(9, 0, n),
            node_id: node.into(),
            timestamp: ts,
            metrics: BTreeMap::from([("metric_00".to_string(), n as f64 * 0.5)]),
        }
    }

    fn open(dir: &Path) -> SegmentStore {
        let (mut s, _) = SegmentStore::open(dir, StoreOptions::default()).unwrap();
        s.ensure_collection("metrics", &["timestamp".into(), "node_id".into()])
            .unwrap();
        s
    }

    fn universal() -> ChunkRange {
        ChunkRange {
            chunk_id: 0,
            lo: KEY_MIN,
            hi: KEY_MAX,
            owner_shard: ShardId::new("s0"),
            approx_doc_count: 0,
            holders: BTreeSet::new(),
        }
    }

    fn ids(docs: &[MetricDocument]) -> Vec<DocId> {
        let mut v: Vec<_> = docs.iter().map(|d| d.doc_id).collect();
        v.sort();
        v
    }

    #[test]
    fn fresh_and_empty_batches() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let r = s.insert_batch(&[]).unwrap();
        assert_eq!(r, InsertManyResult::default());
        let docs: Vec<_> = (0..100).map(|i| doc("n1", 60 * i as i64, i)).collect();
        let r = s.insert_batch(&docs).unwrap();
        assert_eq!((r.inserted_count, r.errors.len()), (100, 0));
    }

    #[test]
    fn duplicates_do_not_stop_the_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let docs: Vec<_> = (0..100).map(|i| doc("n1", 60 * i as i64, 1000 + i)).collect();
        s.insert_batch(&[docs[3].clone(), docs[97].clone()]).unwrap();
        let r = s.insert_batch(&docs).unwrap();
        assert_eq!(r.inserted_count, 98);
        let idx: Vec<_> = r.errors.iter().map(|e| e.batch_index).collect();
        assert_eq!(idx, vec![3, 97]);
        assert!(r.errors.iter().all(|e| e.code == DUPLICATE_KEY));
        // oracle: everything submitted is now stored exactly once
        let all = s
            .find(&Filter {
                ts_lo: Some(0),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(ids(&all), ids(&docs));
    }

    #[test]
    fn duplicate_within_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let d = doc("n", 0, 1);
        let r = s.insert_batch(&[d.clone(), d]).unwrap();
        assert_eq!(r.inserted_count, 1);
        assert_eq!(r.errors[0].batch_index, 1);
    }

    #[test]
    fn time_range_find_uses_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let docs: Vec<_> = (0..=60).map(|m| doc("n1", 60 * m as i64, m)).collect();
        s.insert_batch(&docs).unwrap();
        let f = Filter {
            ts_lo: Some(600),
            ts_hi: Some(720),
            ..Default::default()
        };
        let got = s.find(&f).unwrap();
        let want: Vec<_> = docs.iter().filter(|d| crate::model::matches(d, &f)).cloned().collect();
        assert_eq!(got.len(), 2);
        assert_eq!(ids(&got), ids(&want));
        let none = Filter {
            ts_lo: Some(1_000_000),
            ..Default::default()
        };
        assert!(s.find(&none).unwrap().is_empty());
        let empty_nodes = Filter {
            node_ids: Some(BTreeSet::new()),
            ..Default::default()
        };
        assert!(matches!(s.find(&empty_nodes), Err(Error::MalformedFilter(_))));
    }

    #[test]
    fn index_creation() {
        let dir = tempfile::tempdir().unwrap();
        let (mut s, _) = SegmentStore::open(dir.path(), StoreOptions::default()).unwrap();
        s.ensure_collection("metrics", &[]).unwrap();
        s.create_index("timestamp").unwrap();
        assert_eq!(s.index_len(IndexField::Timestamp), Some(0));
        assert!(matches!(s.create_index("memory_use"), Err(Error::InvalidArgument(_))));

        let dir = tempfile::tempdir().unwrap();
        let (mut s, _) = SegmentStore::open(
            dir.path(),
            StoreOptions {
                sync: false,
                ..Default::default()
            },
        )
        .unwrap();
        s.ensure_collection("metrics", &[]).unwrap();
        let docs: Vec<_> = (0..10_000)
            .map(|i| doc(&format!("n{}", i % 7), 60 * i as i64, i))
            .collect();
        for chunk in docs.chunks(1000) {
            s.insert_batch(chunk).unwrap();
        }
        s.create_index("timestamp").unwrap();
        s.create_index("node_id").unwrap();
        s.create_index("doc_id").unwrap();
        for f in [IndexField::Timestamp, IndexField::NodeId, IndexField::DocId] {
            assert_eq!(s.index_len(f), Some(s.live_doc_count()));
        }
    }

    #[test]
    fn split_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let few: Vec<_> = (0..999)
            .map(|i| doc(&format!("n{}", i % 10), 60 * i as i64, i))
            .collect();
        s.insert_batch(&few).unwrap();
        assert_eq!(s.split_candidate(&universal(), 4096), None);

        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<_> = (0..5000)
            .map(|i| doc(&format!("n{:02}", rng.gen_range(0..20)), 60 * i as i64, i))
            .collect();
        s.insert_batch(&docs).unwrap();
        let k = s.split_candidate(&universal(), 4096).unwrap();
        // oracle: sort keys, the middle element splits 2500/2500
        let mut keys: Vec<_> = docs.iter().map(MetricDocument::shard_key).collect();
        keys.sort();
        assert_eq!(k, keys[2500]);
        let below = keys.iter().filter(|x| **x < k).count();
        assert!((2499..=2501).contains(&below), "{below}");

        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        let same: Vec<_> = (0..5000).map(|i| doc("n1", 0, i)).collect();
        s.insert_batch(&same).unwrap();
        assert_eq!(s.split_candidate(&universal(), 4096), None);
    }

    #[test]
    fn skewed_keys_still_split_inside() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = open(dir.path());
        // 4000 docs on one key, 200 on later keys
        let mut docs: Vec<_> = (0..4000).map(|i| doc("a", 0, i)).collect();
        docs.extend((0..200).map(|i| doc("b", 60 * i as i64, 10_000 + i)));
        s.insert_batch(&docs).unwrap();
        let k = s.split_candidate(&universal(), 4096).unwrap();
        assert!(k > ShardKey::new("a", 0));
        assert_eq!(k, ShardKey::new("b", 0));
    }

    #[test]
    fn recover_counts_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = open(dir.path());
            let docs: Vec<_> = (0..10_000)
                .map(|i| doc(&format!("n{}", i % 4), 60 * i as i64, i))
                .collect();
            for c in docs.chunks(1000) {
                s.insert_batch(c).unwrap();
            }
        }
        let (s, report) = SegmentStore::open(dir.path(), StoreOptions::default()).unwrap();
        assert_eq!(s.live_doc_count(), 10_000);
        assert_eq!(report.truncated_bytes, 0);
        drop(s);

        let seg = segment_path(dir.path(), 0);
        let len = fs::metadata(&seg).unwrap().len();
        OpenOptions::new()
            .write(true)
            .open(&seg)
            .unwrap()
            .set_len(len - 5)
            .unwrap();
        let (s, report) = SegmentStore::open(dir.path(), StoreOptions::default()).unwrap();
        assert_eq!(s.live_doc_count(), 9_999);
        assert!(report.truncated_bytes > 0);
        assert_eq!(s.index_len(IndexField::Timestamp), Some(9_999));
    }

    #[test]
    fn recover_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let (s, report) = SegmentStore::open(dir.path(), StoreOptions::default()).unwrap();
        assert_eq!(s.live_doc_count(), 0);
        assert_eq!(report, RecoveryReport::default());
        assert_eq!(s.collection(), None);
    }

    #[test]
    fn corrupt_sealed_segment_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions {
            segment_max_bytes: 4096,
            sync: false,
        };
        {
            let (mut s, _) = SegmentStore::open(dir.path(), opts.clone()).unwrap();
            s.ensure_collection("metrics", &[]).unwrap();
            let docs: Vec<_> = (0..200).map(|i| doc("n", 60 * i as i64, i)).collect();
            s.insert_batch(&docs).unwrap();
            assert!(s.segment_count() > 2);
        }
        let (s, _) = SegmentStore::open(dir.path(), opts.clone()).unwrap();
        assert_eq!(s.live_doc_count(), 200);
        assert!(s.manifest().sealed_segments.len() >= 2);
        drop(s);
        let seg = segment_path(dir.path(), 0);
        let mut bytes = fs::read(&seg).unwrap();
        bytes[20] ^= 0xff;
        fs::write(&seg, bytes).unwrap();
        assert!(matches!(SegmentStore::open(dir.path(), opts), Err(Error::Recovery(_))));
    }

    #[test]
    fn segments_roll_and_stay_readable() {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions {
            segment_max_bytes: 2048,
            sync: false,
        };
        let (mut s, _) = SegmentStore::open(dir.path(), opts.clone()).unwrap();
        s.ensure_collection("metrics", &["node_id".into()]).unwrap();
        let docs: Vec<_> = (0..300)
            .map(|i| doc(&format!("n{}", i % 3), 60 * i as i64, i))
            .collect();
        for c in docs.chunks(37) {
            s.insert_batch(c).unwrap();
        }
        let f = Filter {
            node_ids: Some(BTreeSet::from(["n1".to_string()])),
            ..Default::default()
        };
        assert_eq!(s.find(&f).unwrap().len(), 100);
        for i in 0..s.segment_count() as u32 {
            assert!(fs::metadata(segment_path(dir.path(), i)).unwrap().len() <= 2048);
        }
        drop(s);
        let (s, _) = SegmentStore::open(dir.path(), opts).unwrap();
        assert_eq!(s.find(&f).unwrap().len(), 100);
    }
}
