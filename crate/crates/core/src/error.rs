use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no manifest.json under {0}")]
    MissingManifest(PathBuf),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("unsupported bundle version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("tensor `{name}`: expected {expected} bytes, file provides {available}")]
    SizeMismatch {
        name: String,
        expected: u64,
        available: u64,
    },

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Metadata { what: String, message: String },

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("no labels for image `{0}`")]
    MissingLabels(String),

    #[error("layer {0} not present in bundle")]
    MissingLayer(usize),

    #[error("no attention maps for image `{0}`")]
    MissingAttention(String),

    #[error("centroid is degenerate (mean vector has ~zero norm)")]
    DegenerateCentroid,

    #[error("need at least 2 centroids, got {0}")]
    TooFewCentroids(usize),

    #[error("need at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("gallery needs at least 2 images, got {0}")]
    InsufficientGallery(usize),

    #[error("index {index} out of range 0..{len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("selection is empty")]
    EmptySelection,

    #[error("cannot sample {requested} of {available} tokens for image `{image}`")]
    SampleTooLarge {
        image: String,
        requested: usize,
        available: usize,
    },

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("invalid decouple target `{0}` (expected vMHA or vFFN)")]
    InvalidTarget(String),

    #[error("invalid scale factor {0} (must be finite and > 0)")]
    InvalidFactor(f64),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("render failure: {0}")]
    RenderFailure(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn metadata(what: &str, message: impl Into<String>) -> Self {
        Error::Metadata {
            what: what.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
