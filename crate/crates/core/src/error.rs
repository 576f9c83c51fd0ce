use thiserror::Error;

use crate::mesh::Coord;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse config: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("model needs {needed} compute tiles but at most {max} are configured")]
    TooManyCts { needed: usize, max: usize },

    #[error("members are not connected within the mesh starting from {root}")]
    Disconnected { root: Coord },

    #[error("KV buffers exhausted at token {token} (capacity {capacity} tokens)")]
    KvCapacityExhausted { token: u64, capacity: u64 },

    #[error("plan/program mismatch: {0}")]
    PlanMismatch(String),

    #[error("dependency cycle or dangling dependency at instruction tag {0}")]
    Dependency(u32),

    #[error("deadlock at cycle {cycle}: {report}")]
    Deadlock { cycle: u64, report: String },

    #[error("unknown report format `{0}`")]
    UnknownFormat(String),

    #[error("power must be positive, got {0}")]
    NonPositivePower(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}
