use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum CtpError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("{what} {value} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        limit: u64,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("source `{0}` exhausted")]
    Exhausted(String),

    #[error("unknown source `{0}`")]
    UnknownSource(String),

    #[error("non-finite value at example {index}: {detail}")]
    Numerical { index: usize, detail: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("refusing to resume from an annealed checkpoint (step {step}); set allow_post_anneal to override")]
    PostAnnealResume { step: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("arm `{arm}` failed: {source}")]
    Arm {
        arm: String,
        #[source]
        source: Box<CtpError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CtpError> = std::result::Result<T, E>;
