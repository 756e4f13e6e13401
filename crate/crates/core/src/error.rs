use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by what went wrong rather than by which module raised
/// them; [`Error::kind`] collapses them further for callers that only need to
/// decide an exit status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: byte offset {offset}: {message}")]
    MalformedBinary {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("instance `{id}` has embedding length {found}, corpus dimension is {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),

    #[error("instance `{id}` has a non-finite embedding component at position {position}")]
    NonFiniteEmbedding { id: String, position: usize },

    #[error("quality {value} for `{id}` is outside [0, 1]")]
    QualityOutOfRange { id: String, value: f64 },

    #[error("unknown instance id `{0}`")]
    UnknownId(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("missing quality score for {count} instance(s), e.g. {examples:?}")]
    MissingQuality { count: usize, examples: Vec<String> },

    #[error("invalid selection: {0}")]
    InvalidSelection(String),

    #[error("invalid k = {k} for a corpus of {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    VectorDimension { expected: usize, found: usize },

    #[error("cannot form {k} non-empty clusters: the corpus has fewer distinct points")]
    DegenerateClustering { k: usize },

    #[error("clustering does not match corpus: {0}")]
    ClusteringMismatch(String),

    #[error("silhouette is undefined: {0}")]
    SilhouetteUndefined(String),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("cluster {cluster} cannot be sampled: {reason}")]
    ClusterSampling { cluster: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scorer failed: {0}")]
    Scorer(String),

    #[error("run state: {0}")]
    State(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Scorer,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidK { .. }
            | InvalidBudget(_)
            | InvalidWeights(_)
            | InvalidArgument(_)
            | SilhouetteUndefined(_) => ErrorKind::Config,
            Scorer(_) => ErrorKind::Scorer,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
