use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has been released; rebuild the forward pass before calling backward")]
    GraphConsumed,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("token id {id} is out of range for vocabulary of size {vocab}")]
    VocabOverflow { id: usize, vocab: usize },

    #[error("normalized direction undefined for a zero gradient")]
    ZeroGradient,
    #[error("gradient has length {actual}, parameters have {expected}")]
    Misaligned { expected: usize, actual: usize },

    #[error("bad IDX magic number {0:#010x}")]
    BadMagic(u32),
    #[error("truncated IDX file: header promises {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("corpus of {len} bytes is too small for sequence length {seq_len}")]
    CorpusTooSmall { len: usize, seq_len: usize },
    #[error("full-batch plan would drop {dropped} of {n_samples} samples (batch {batch_size}), more than 0.5%")]
    TrimTooLarge {
        n_samples: usize,
        batch_size: usize,
        dropped: usize,
    },
    #[error("batch size {batch_size} exceeds the {available} available samples")]
    BatchTooLarge { batch_size: usize, available: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("gaussian reference has zero spread")]
    DegenerateFit,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("full gradient must be computed in eval mode")]
    DropoutActive,

    #[error("ladder top {top} must be below the {kept} kept samples")]
    LadderTooTall { top: usize, kept: usize },
    #[error("every grid candidate diverged")]
    AllDiverged,

    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("plot selection matched no rows")]
    EmptySelection,
    #[error("no records to write")]
    NoRecords,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
