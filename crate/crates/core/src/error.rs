use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}: manifest contains no records")]
    EmptyManifest(PathBuf),

    #[error("subset of manifest `{0}` is empty")]
    EmptySubset(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{what} is not unit norm (norm {norm})")]
    NotUnitNorm { what: String, norm: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("classes without samples: {0:?}")]
    EmptyClasses(Vec<usize>),

    #[error("class {0} has a zero-norm mean embedding")]
    ZeroNormMean(usize),

    #[error("embedding row {0} has zero norm")]
    ZeroNormEmbedding(usize),

    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),

    #[error("invalid fine-tuning regime: {0}")]
    Regime(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("score set has no genuine pairs")]
    NoGenuinePairs,

    #[error("score set has no impostor pairs")]
    NoImpostorPairs,

    #[error("probe identity `{0}` is not enrolled in the gallery")]
    ProbeNotInGallery(String),

    #[error("checkpoint file {file}: {message}")]
    Checkpoint { file: PathBuf, message: String },

    #[error("reports disagree on metric keys: {0}")]
    InconsistentMetrics(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
