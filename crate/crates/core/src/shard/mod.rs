//! Shard worker: a [`store::SegmentStore`] behind the wire protocol.

pub mod server;
pub mod store;

pub use server::{ShardHandle, ShardOptions, ShardServer, DEFAULT_SPLIT_THRESHOLD};
pub use store::{Locator, Manifest, RecoveryReport, SegmentStore, StoreOptions};
