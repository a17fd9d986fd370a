//! A small sharded document store for per-minute metric samples, with the
//! tooling to run it as a batch job and benchmark it.
//!
//! Clients talk to routers only; routers consult the config server's shard
//! map and fan requests out to shards over a length-prefixed JSON protocol.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod local;
pub mod model;
pub mod net;
pub mod orchestrator;
pub mod router;
pub mod shard;
pub mod wire;
pub mod worker;

pub use error::{Error, Result};
pub use model::{DocId, Filter, InsertManyResult, JobRecord, MetricDocument, RoleAssignment, ShardKey, ShardMap};
pub use router::RouterClient;
