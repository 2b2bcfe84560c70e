//! Crate-wide error and result types.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while orchestrating a run.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A token event violated its structural invariants (empty
    /// distribution, positive or non-finite logprob, unsorted top list).
    #[error("malformed token event: {0}")]
    MalformedEvent(String),

    /// A parameter was outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An operation that needs at least one generated token was handed an
    /// empty trajectory.
    #[error("empty trajectory: {0}")]
    EmptyTrajectory(String),

    /// Threshold calibration was attempted with no usable warmup minima.
    #[error("no usable warmup minima to calibrate a threshold from")]
    EmptyWarmupSet,

    /// Every warmup trace for a question failed, so no threshold exists.
    #[error("warmup failed for question {question_id}: {detail}")]
    WarmupFailed { question_id: String, detail: String },

    /// The merged configuration is inconsistent or out of range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A transport-level backend failure. `retryable` distinguishes
    /// transient faults (connection refused, 5xx) from permanent ones.
    #[error("backend failure: {detail}")]
    Backend { detail: String, retryable: bool },

    /// The backend produced tokens without logprobs. This is a fatal
    /// endpoint misconfiguration, not a transient fault.
    #[error("backend returned no logprobs: {0}")]
    MissingLogprobs(String),

    /// A dataset line failed to parse or violated dataset invariants.
    #[error("dataset error at line {line}: {detail}")]
    Dataset { line: usize, detail: String },

    /// A script file line failed to parse or violated script invariants.
    #[error("script error at line {line}: {detail}")]
    Script { line: usize, detail: String },

    /// A requested archive id is not present in the store.
    #[error("archive not found: {0}")]
    ArchiveNotFound(String),

    /// An archive's contents are internally inconsistent.
    #[error("corrupt archive {archive_id}: {detail}")]
    Archive { archive_id: String, detail: String },

    /// The archive on disk was written by a newer schema than we read.
    #[error("unsupported archive schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    /// Replaying an archive diverged from the recorded run.
    #[error("replay mismatch in archive {archive_id}: {detail}")]
    ReplayMismatch { archive_id: String, detail: String },

    /// Report compilation was handed inconsistent inputs.
    #[error("report error: {0}")]
    Report(String),

    /// Filesystem trouble, annotated with the path involved.
    #[error("storage error on {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization trouble.
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for a retryable transport failure.
    pub fn backend_transient(detail: impl Into<String>) -> Self {
        Error::Backend {
            detail: detail.into(),
            retryable: true,
        }
    }

    /// Shorthand for a permanent backend failure.
    pub fn backend_fatal(detail: impl Into<String>) -> Self {
        Error::Backend {
            detail: detail.into(),
            retryable: false,
        }
    }

    /// Attach a path to an I/O error.
    pub fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    /// Whether a retry could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { retryable: true, .. })
    }
}
