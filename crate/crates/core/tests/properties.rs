use std::collections::{BTreeMap, BTreeSet};

use proptest::collection::vec;
use proptest::prelude::*;

use shardbatch::bench::{self, WINDOW_START};
use shardbatch::config::ClusterMetadata;
use shardbatch::model::{DocId, Filter, MetricDocument, ShardId, ShardKey};
use shardbatch::orchestrator::assign_roles;
use shardbatch::shard::{SegmentStore, StoreOptions};
use shardbatch::wire::{self, Envelope, FrameDecoder, Message};

const COLLECTION: &str = "metrics";

fn arb_doc(min_metrics: usize) -> impl Strategy<Value = MetricDocument> {
    (
        any::<[u8; 16]>(),
        "[a-z0-9\\-]{0,10}",
        any::<i64>(),
        proptest::collection::btree_map("[a-z_]{1,8}", -1e15f64..1e15, min_metrics..6),
    )
        .prop_map(|(id, node_id, timestamp, metrics)| MetricDocument {
            doc_id: DocId(id),
            node_id,
            timestamp,
            metrics,
        })
}

fn arb_message() -> impl Strategy<Value = Message> {
    let key = prop_oneof![
        Just(ShardKey::Min),
        Just(ShardKey::Max),
        (".{0,6}", any::<i64>()).prop_map(|(n, t)| ShardKey::new(n, t)),
    ];
    let filter = (
        proptest::option::of(proptest::collection::btree_set(".{0,6}", 0..4)),
        proptest::option::of(any::<i64>()),
        proptest::option::of(any::<i64>()),
    )
        .prop_map(|(node_ids, ts_lo, ts_hi)| Filter {
            node_ids,
            ts_lo,
            ts_hi,
            doc_id: None,
        });
    prop_oneof![
        Just(Message::Ping {}),
        Just(Message::Ack {}),
        (".{0,12}", vec(arb_doc(0), 0..8), any::<u64>(), any::<bool>()).prop_map(
            |(collection, docs, map_version, ordered)| Message::InsertBatch {
                collection,
                docs,
                map_version,
                ordered,
            }
        ),
        (".{0,12}", filter, any::<u64>()).prop_map(|(collection, filter, map_version)| Message::Find {
            collection,
            filter,
            map_version,
        }),
        vec(arb_doc(0), 0..8).prop_map(|docs| Message::FindBatch { docs }),
        (".{0,12}", any::<u64>(), key).prop_map(|(collection, chunk_id, split_key)| Message::ReportSplit {
            collection,
            chunk_id,
            split_key,
        }),
        (".{0,8}", ".{0,40}").prop_map(|(code, message)| Message::Error { code, message }),
    ]
}

fn arb_envelope() -> impl Strategy<Value = Envelope> {
    (any::<u64>(), ".{0,10}", arb_message()).prop_map(|(req, token, m)| Envelope::new(req, m).with_token(token))
}

fn metadata(shards: usize) -> ClusterMetadata {
    let mut meta = ClusterMetadata::default();
    for i in 0..shards {
        let id = ShardId::new(format!("shard-{i}"));
        meta.register_shard(&id, &format!("127.0.0.1:{}", 9000 + i), "/data").unwrap();
    }
    meta.create_collection(COLLECTION, &["timestamp".into(), "node_id".into()]).unwrap();
    meta
}

fn key_of(node: u8, ts: i64) -> ShardKey {
    ShardKey::new(format!("n{node:02}"), ts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn envelopes_survive_any_fragmentation(
        envs in vec(arb_envelope(), 1..12),
        cuts in vec(1usize..64, 1..200),
    ) {
        let mut stream = Vec::new();
        for e in &envs {
            let frame = wire::encode(e).unwrap();
            prop_assert_eq!(&wire::decode_exact(&frame).unwrap(), e);
            stream.extend(frame);
        }
        let mut dec = FrameDecoder::new();
        let mut got = Vec::new();
        let (mut pos, mut i) = (0, 0);
        while pos < stream.len() {
            let end = (pos + cuts[i % cuts.len()]).min(stream.len());
            dec.feed(&stream[pos..end]);
            pos = end;
            i += 1;
            while let Some(e) = dec.next_envelope().unwrap() {
                got.push(e);
            }
        }
        prop_assert_eq!(got, envs);
        prop_assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn splits_keep_a_balanced_partition(
        shards in 1usize..6,
        keys in vec((0u8..20, -50i64..50), 1..80),
    ) {
        let mut meta = metadata(shards);
        let mut version = meta.version;
        for (node, ts) in keys {
            let key = key_of(node, ts);
            let map = &meta.collections[COLLECTION];
            let chunk = map.chunk_for(&key).clone();
            if chunk.lo == key {
                continue;
            }
            let map = meta.report_split(COLLECTION, chunk.chunk_id, &key).unwrap();
            prop_assert!(map.version > version);
            version = map.version;

            prop_assert_eq!(&map.chunks[0].lo, &ShardKey::Min);
            prop_assert_eq!(&map.chunks.last().unwrap().hi, &ShardKey::Max);
            for w in map.chunks.windows(2) {
                prop_assert_eq!(&w[0].hi, &w[1].lo);
            }
            let mut counts: BTreeMap<&ShardId, usize> = BTreeMap::new();
            for c in &map.chunks {
                prop_assert!(c.lo < c.hi);
                *counts.entry(&c.owner_shard).or_default() += 1;
            }
            let max = counts.values().max().copied().unwrap_or(0);
            let min = if counts.len() < shards { 0 } else { counts.values().min().copied().unwrap_or(0) };
            prop_assert!(max - min <= 1, "{:?}", counts);
        }
    }

    /// A document written to the owner of its chunk stays reachable by any
    /// find that matches it, however the chunk is later split.
    #[test]
    fn find_targets_cover_every_copy(
        shards in 1usize..5,
        ops in vec((any::<bool>(), 0u8..8, -30i64..30), 1..120),
        probe_lo in -40i64..40,
        probe_span in 1i64..40,
    ) {
        let mut meta = metadata(shards);
        let mut stored: Vec<(ShardKey, ShardId)> = Vec::new();
        for (is_split, node, ts) in ops {
            let key = key_of(node, ts);
            let map = &meta.collections[COLLECTION];
            let chunk = map.chunk_for(&key).clone();
            if is_split {
                if chunk.lo != key {
                    meta.report_split(COLLECTION, chunk.chunk_id, &key).unwrap();
                }
            } else {
                stored.push((key, chunk.owner_shard));
            }
        }
        let map = &meta.collections[COLLECTION];
        for (key, at) in &stored {
            let ShardKey::Key { node_id, timestamp } = key else { unreachable!() };
            let exact = Filter::nodes_and_time([node_id.clone()], *timestamp, timestamp + 1);
            prop_assert!(map.target_shards(&exact).contains(at));
            let probe = Filter::nodes_and_time([node_id.clone()], probe_lo, probe_lo + probe_span);
            if (probe_lo..probe_lo + probe_span).contains(timestamp) {
                prop_assert!(map.target_shards(&probe).contains(at));
            }
            let everything = Filter { ts_lo: Some(i64::MIN), ..Default::default() };
            prop_assert!(map.target_shards(&everything).contains(at));
        }
    }

    #[test]
    fn role_assignment_partitions_hosts(k in 2usize..80) {
        let n = 4 * k;
        let hosts: Vec<String> = (0..n).map(|i| format!("h{i}")).collect();
        let a = assign_roles(&hosts, true).unwrap();
        let (c, s, r, cl) = a.counts();
        prop_assert_eq!(c, 2);
        prop_assert_eq!(s, r);
        prop_assert_eq!(cl, n / 2);
        prop_assert_eq!(c + s + r + cl, n);
        let all: Vec<&String> = a.all_hosts().collect();
        prop_assert_eq!(all, hosts.iter().collect::<Vec<_>>());
    }

    #[test]
    fn generated_jobs_stay_inside_the_window(
        nodes in 1usize..100,
        days in 1u32..15,
        n in 0usize..40,
        seed in any::<u64>(),
    ) {
        let names = bench::node_names(nodes);
        let jobs = bench::generate_jobs(n, &names, WINDOW_START, days, seed).unwrap();
        prop_assert_eq!(jobs.len(), n);
        let end = WINDOW_START + i64::from(days) * 86_400;
        for j in &jobs {
            prop_assert!(!j.node_ids.is_empty() && j.node_ids.len() <= nodes.min(64));
            prop_assert!(j.node_ids.iter().all(|id| names.contains(id)));
            prop_assert_eq!(j.start % 60, 0);
            prop_assert!(j.start >= WINDOW_START);
            prop_assert!(j.duration_minutes >= 1 && j.duration_minutes <= 2880);
            prop_assert!(j.start + 60 * i64::from(j.duration_minutes) <= end);
        }
        prop_assert_eq!(bench::generate_jobs(n, &names, WINDOW_START, days, seed).unwrap(), jobs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metric_streams_have_one_doc_per_node_minute(
        nodes in 1usize..4,
        days in 1u32..3,
        n_metrics in 1usize..5,
        seed in any::<u64>(),
    ) {
        let names = bench::node_names(nodes);
        let docs: Vec<MetricDocument> =
            bench::generate_metrics(&names, WINDOW_START, days, n_metrics, seed).unwrap().collect();
        prop_assert_eq!(docs.len(), nodes * days as usize * 1440);
        let ids: BTreeSet<DocId> = docs.iter().map(|d| d.doc_id).collect();
        prop_assert_eq!(ids.len(), docs.len());
        let cells: BTreeSet<(&str, i64)> = docs.iter().map(|d| (d.node_id.as_str(), d.timestamp)).collect();
        prop_assert_eq!(cells.len(), docs.len());
        prop_assert!(docs.iter().all(|d| d.timestamp % 60 == 0 && d.metrics.len() == n_metrics));
    }

    /// Cutting into the last record loses that record and nothing else.
    #[test]
    fn torn_tail_loses_only_the_last_record(
        docs in vec(arb_doc(1), 1..40),
        batch in 1usize..8,
        cut in 1u64..9,
    ) {
        let mut unique = BTreeMap::new();
        for d in docs {
            unique.entry(d.doc_id).or_insert(d);
        }
        let docs: Vec<MetricDocument> = unique.into_values().collect();
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut store, _) = SegmentStore::open(dir.path(), StoreOptions::default()).unwrap();
            store.ensure_collection(COLLECTION, &[]).unwrap();
            for chunk in docs.chunks(batch) {
                store.insert_batch(chunk).unwrap();
            }
        }
        let seg = dir.path().join("seg-0.log");
        let len = std::fs::metadata(&seg).unwrap().len();
        std::fs::OpenOptions::new().write(true).open(&seg).unwrap().set_len(len - cut).unwrap();

        let (store, report) = SegmentStore::open(dir.path(), StoreOptions::default()).unwrap();
        prop_assert!(report.truncated_bytes > 0);
        prop_assert_eq!(store.live_doc_count(), docs.len() - 1);
        let last = docs.last().unwrap();
        let kept: Vec<&MetricDocument> = docs[..docs.len() - 1].iter().collect();
        prop_assert!(!store.contains(&last.doc_id));
        for d in kept {
            prop_assert!(store.contains(&d.doc_id));
        }
    }
}
