//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
#[non_exhaustive]
pub enum Error {
    #[error("graph has no layers")]
    EmptyGraph,

    #[error("atomic span ({start}, {end}) is out of bounds or inverted for a graph of {len} layers")]
    BadSpan { start: usize, end: usize, len: usize },

    #[error("cutoff {cutoff} splits the atomic span ({start}, {end})")]
    CutoffInsideSpan {
        cutoff: usize,
        start: usize,
        end: usize,
    },

    #[error("cutoff {cutoff} is not a valid layer index (graph has {len} layers)")]
    InvalidCutoff { cutoff: usize, len: usize },

    #[error("layer `{layer}` has no spatial metadata; run spatial inference or set it explicitly")]
    MissingSpatial { layer: String },

    #[error("layer `{layer}`: {reason}")]
    InvalidLayer { layer: String, reason: String },

    #[error("no layer named `{name}` in the graph")]
    UnknownLayer { name: String },

    #[error("layer `{layer}` has {channels} output channels in {groups} groups; halving would break divisibility")]
    UnsplittableGroups {
        layer: String,
        channels: usize,
        groups: usize,
    },

    #[error("graph is not an encoder-decoder: {reason}")]
    NotEncoderDecoder { reason: String },

    #[error("dataset split infeasible: {reason}")]
    BadSplit { reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("activation matrix needs more rows than columns for a stable estimate ({rows} rows, {cols} cols)")]
    TooFewRows { rows: usize, cols: usize },

    #[error("matrix dimensions disagree: left has {left} rows, right has {right}")]
    RowCountMismatch { left: usize, right: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("eigendecomposition failed in {context}")]
    EigenFailure { context: String },

    #[error("no truncation candidates to search over")]
    NoCandidates,

    #[error("metric undefined: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: malformed {what}: {reason}")]
    Format {
        path: String,
        what: String,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("failed to parse TOML config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("failed to serialize TOML config: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Attach file context to a low-level parse failure.
    pub fn format(path: impl Into<String>, what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            what: what.into(),
            reason: reason.into(),
        }
    }

    /// Attach a pipeline stage name to a failure.
    pub fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }
}
