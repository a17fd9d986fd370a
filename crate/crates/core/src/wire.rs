//! Length-prefixed JSON framing and the message schema.
//!
//! A frame is a 4-byte big-endian body length followed by exactly that many
//! bytes of UTF-8 JSON:
//!
//! ```text
//! {"type":"find","req_id":7,"cluster_token":"...","payload":{...}}
//! ```
//!
//! Responses echo the request's `req_id`. A `find` is answered by zero or
//! more `find_batch` frames followed by `end_of_results` (or `error`).

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::config::Mutation;
use crate::error::{Error, Result};
use crate::model::{DocId, Filter, InsertManyResult, MetricDocument, ShardId, ShardKey, ShardMap};

pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;
pub const FIND_PAGE_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionSpec {
    pub name: String,
    pub index_fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Message {
    Ping {},
    Pong {},
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        role: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shards: Option<Vec<ShardId>>,
    },
    Ack {},
    RegisterShard {
        shard_id: ShardId,
        endpoint: String,
        data_path: String,
    },
    Registered {
        collections: Vec<CollectionSpec>,
    },
    CreateCollection {
        name: String,
        index_fields: Vec<String>,
    },
    CreateIndex {
        collection: String,
        field: String,
    },
    GetShardmap {
        collection: String,
        known_version: u64,
    },
    Shardmap {
        map: ShardMap,
    },
    NotModified {
        version: u64,
    },
    ReportSplit {
        collection: String,
        chunk_id: u64,
        split_key: ShardKey,
    },
    MirrorApply {
        mutation: Mutation,
    },
    InsertBatch {
        collection: String,
        docs: Vec<MetricDocument>,
        #[serde(default)]
        map_version: u64,
        #[serde(default)]
        ordered: bool,
    },
    InsertBatchResult {
        #[serde(flatten)]
        result: InsertManyResult,
    },
    Exists {
        collection: String,
        doc_ids: Vec<DocId>,
    },
    ExistsResult {
        doc_ids: Vec<DocId>,
    },
    Find {
        collection: String,
        filter: Filter,
        #[serde(default)]
        map_version: u64,
    },
    FindBatch {
        docs: Vec<MetricDocument>,
    },
    EndOfResults {
        count: u64,
    },
    StaleVersion {
        collection: String,
        version: u64,
    },
    Error {
        code: String,
        message: String,
    },
    Shutdown {},
}

impl Message {
    pub const TYPES: &'static [&'static str] = &[
        "ping",
        "pong",
        "hello",
        "ack",
        "register_shard",
        "registered",
        "create_collection",
        "create_index",
        "get_shardmap",
        "shardmap",
        "not_modified",
        "report_split",
        "mirror_apply",
        "insert_batch",
        "insert_batch_result",
        "exists",
        "exists_result",
        "find",
        "find_batch",
        "end_of_results",
        "stale_version",
        "error",
        "shutdown",
    ];

    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Ping {} => "ping",
            Message::Pong {} => "pong",
            Message::Hello { .. } => "hello",
            Message::Ack {} => "ack",
            Message::RegisterShard { .. } => "register_shard",
            Message::Registered { .. } => "registered",
            Message::CreateCollection { .. } => "create_collection",
            Message::CreateIndex { .. } => "create_index",
            Message::GetShardmap { .. } => "get_shardmap",
            Message::Shardmap { .. } => "shardmap",
            Message::NotModified { .. } => "not_modified",
            Message::ReportSplit { .. } => "report_split",
            Message::MirrorApply { .. } => "mirror_apply",
            Message::InsertBatch { .. } => "insert_batch",
            Message::InsertBatchResult { .. } => "insert_batch_result",
            Message::Exists { .. } => "exists",
            Message::ExistsResult { .. } => "exists_result",
            Message::Find { .. } => "find",
            Message::FindBatch { .. } => "find_batch",
            Message::EndOfResults { .. } => "end_of_results",
            Message::StaleVersion { .. } => "stale_version",
            Message::Error { .. } => "error",
            Message::Shutdown {} => "shutdown",
        }
    }

    pub fn error(e: &Error) -> Message {
        Message::Error {
            code: e.code().to_string(),
            message: e.wire_message(),
        }
    }

    /// Turns an `error` message into `Err`, passing every other message through.
    pub fn into_result(self) -> Result<Message> {
        match self {
            Message::Error { code, message } => Err(Error::from_remote(&code, &message)),
            other => Ok(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub req_id: u64,
    pub cluster_token: String,
    pub message: Message,
}

impl Envelope {
    pub fn new(req_id: u64, message: Message) -> Self {
        Envelope {
            req_id,
            cluster_token: String::new(),
            message,
        }
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.cluster_token = token.into();
        self
    }
}

#[derive(Serialize)]
struct OutEnvelope<'a> {
    req_id: u64,
    #[serde(skip_serializing_if = "str::is_empty")]
    cluster_token: &'a str,
    #[serde(flatten)]
    message: &'a Message,
}

#[derive(Deserialize)]
struct InEnvelope<'a> {
    #[serde(rename = "type")]
    kind: String,
    req_id: u64,
    #[serde(default)]
    cluster_token: String,
    #[serde(borrow, default)]
    payload: Option<&'a RawValue>,
}

/// Serializes `env` into one complete frame.
pub fn encode(env: &Envelope) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; 4];
    serde_json::to_writer(
        &mut buf,
        &OutEnvelope {
            req_id: env.req_id,
            cluster_token: &env.cluster_token,
            message: &env.message,
        },
    )
    .map_err(|e| Error::Protocol(format!("cannot serialize {}: {e}", env.message.type_name())))?;
    let body_len = buf.len() - 4;
    if body_len > MAX_FRAME_BYTES {
        return Err(Error::Oversize(body_len));
    }
    buf[..4].copy_from_slice(&(body_len as u32).to_be_bytes());
    Ok(buf)
}

/// Parses a frame body (the JSON text without its length prefix).
pub fn decode_body(body: &[u8]) -> Result<Envelope> {
    let text = std::str::from_utf8(body).map_err(|e| Error::Protocol(format!("frame body is not UTF-8: {e}")))?;
    let raw: InEnvelope<'_> =
        serde_json::from_str(text).map_err(|e| Error::Protocol(format!("malformed envelope: {e}")))?;
    if !Message::TYPES.contains(&raw.kind.as_str()) {
        return Err(Error::UnknownType(raw.kind));
    }
    let payload = raw.payload.map(RawValue::get).unwrap_or("{}");
    let tagged = format!("{{\"type\":\"{}\",\"payload\":{}}}", raw.kind, payload);
    let message: Message =
        serde_json::from_str(&tagged).map_err(|e| Error::Protocol(format!("bad {} payload: {e}", raw.kind)))?;
    Ok(Envelope {
        req_id: raw.req_id,
        cluster_token: raw.cluster_token,
        message,
    })
}

#[derive(Debug, PartialEq)]
pub enum Decoded {
    NeedMore,
    Frame { envelope: Envelope, consumed: usize },
}

/// Decodes the first frame in `bytes`, without consuming anything when the
/// frame is incomplete.
pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 4 {
        return Ok(Decoded::NeedMore);
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::Oversize(len));
    }
    if bytes.len() < 4 + len {
        return Ok(Decoded::NeedMore);
    }
    let envelope = decode_body(&bytes[4..4 + len])?;
    Ok(Decoded::Frame {
        envelope,
        consumed: 4 + len,
    })
}

/// Decodes a buffer that must hold exactly one frame.
pub fn decode_exact(bytes: &[u8]) -> Result<Envelope> {
    match decode(bytes)? {
        Decoded::Frame { envelope, consumed } if consumed == bytes.len() => Ok(envelope),
        Decoded::Frame { consumed, .. } => Err(Error::Protocol(format!(
            "length mismatch: prefix covers {consumed} bytes, buffer has {}",
            bytes.len()
        ))),
        Decoded::NeedMore => Err(Error::Protocol(format!(
            "length mismatch: truncated frame of {} bytes",
            bytes.len()
        ))),
    }
}

/// Incremental decoder for a byte stream carrying back-to-back frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_envelope(&mut self) -> Result<Option<Envelope>> {
        match decode(&self.buf[self.start..])? {
            Decoded::NeedMore => {
                if self.start > 0 {
                    self.buf.drain(..self.start);
                    self.start = 0;
                }
                Ok(None)
            }
            Decoded::Frame { envelope, consumed } => {
                self.start += consumed;
                Ok(Some(envelope))
            }
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }
}
