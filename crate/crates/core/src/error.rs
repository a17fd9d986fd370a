use std::path::PathBuf;

/// Errors surfaced by every shardbatch component.
///
/// Each variant maps to a stable string code (see [`Error::code`]) which is
/// what travels over the wire inside `error` envelopes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("frame body of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
    #[error("request to {0} timed out")]
    Timeout(String),
    #[error("node {0} is down")]
    NodeDown(String),
    #[error("request rejected: missing or wrong cluster token")]
    Auth,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("stale version: {0}")]
    StaleVersion(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed filter: {0}")]
    MalformedFilter(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("recovery error: {0}")]
    Recovery(String),
    #[error("only unordered insert_many is supported")]
    UnsupportedMode,
    #[error("cluster unavailable: {0}")]
    ClusterUnavailable(String),
    #[error("partial results: shard {shard} failed: {reason}")]
    PartialResults { shard: String, reason: String },
    #[error("metadata unavailable: {0}")]
    MetadataUnavailable(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("too few nodes: {0} unique hosts, at least 8 required")]
    TooFewNodes(usize),
    #[error("invalid node count {0}: must be a multiple of 4")]
    InvalidCount(usize),
    #[error("launch failed: {role} worker {worker} did not come up: {excerpt}")]
    LaunchFailed {
        role: String,
        worker: String,
        excerpt: String,
    },
    #[error("data root {0} is locked by a live cluster")]
    Lock(PathBuf),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("remote error [{code}]: {message}")]
    Remote { code: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn code(&self) -> &str {
        match self {
            Error::Protocol(_) => "protocol",
            Error::UnknownType(_) => "unknown_type",
            Error::Oversize(_) => "oversize",
            Error::Timeout(_) => "timeout",
            Error::NodeDown(_) => "node_down",
            Error::Auth => "unauthorized",
            Error::Conflict(_) => "conflict",
            Error::Precondition(_) => "precondition",
            Error::NotFound(_) => "not_found",
            Error::StaleVersion(_) => "stale_version",
            Error::InvalidSplit(_) => "invalid_split",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MalformedFilter(_) => "malformed_filter",
            Error::Storage(_) => "storage",
            Error::Recovery(_) => "recovery",
            Error::UnsupportedMode => "unsupported_mode",
            Error::ClusterUnavailable(_) => "cluster_unavailable",
            Error::PartialResults { .. } => "partial_results",
            Error::MetadataUnavailable(_) => "metadata_unavailable",
            Error::Routing(_) => "routing",
            Error::TooFewNodes(_) => "too_few_nodes",
            Error::InvalidCount(_) => "invalid_count",
            Error::LaunchFailed { .. } => "launch_failed",
            Error::Lock(_) => "lock",
            Error::InvalidState(_) => "invalid_state",
            Error::Format(_) => "format",
            Error::Remote { code, .. } => code,
            Error::Io(_) => "io",
        }
    }

    /// Rebuilds a typed error from an `error` envelope received from a peer.
    pub fn from_remote(code: &str, message: &str) -> Error {
        let m = message.to_string();
        match code {
            "unauthorized" => Error::Auth,
            "conflict" => Error::Conflict(m),
            "precondition" => Error::Precondition(m),
            "not_found" => Error::NotFound(m),
            "stale_version" => Error::StaleVersion(m),
            "invalid_split" => Error::InvalidSplit(m),
            "invalid_argument" => Error::InvalidArgument(m),
            "malformed_filter" => Error::MalformedFilter(m),
            "unsupported_mode" => Error::UnsupportedMode,
            "cluster_unavailable" => Error::ClusterUnavailable(m),
            "metadata_unavailable" => Error::MetadataUnavailable(m),
            "routing" => Error::Routing(m),
            "unknown_type" => Error::UnknownType(m),
            "protocol" => Error::Protocol(m),
            "partial_results" => {
                let (shard, reason) = m.split_once(": ").unwrap_or((&m, ""));
                Error::PartialResults {
                    shard: shard.to_string(),
                    reason: reason.to_string(),
                }
            }
            _ => Error::Remote {
                code: code.to_string(),
                message: m,
            },
        }
    }

    /// Message carried in an `error` envelope; inverse of [`Error::from_remote`].
    pub fn wire_message(&self) -> String {
        match self {
            Error::Conflict(m)
            | Error::Precondition(m)
            | Error::NotFound(m)
            | Error::StaleVersion(m)
            | Error::InvalidSplit(m)
            | Error::InvalidArgument(m)
            | Error::MalformedFilter(m)
            | Error::ClusterUnavailable(m)
            | Error::MetadataUnavailable(m)
            | Error::Routing(m)
            | Error::UnknownType(m)
            | Error::Protocol(m) => m.clone(),
            Error::PartialResults { shard, reason } => format!("{shard}: {reason}"),
            Error::Remote { message, .. } => message.clone(),
            other => other.to_string(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Timeout(_))
    }
}
