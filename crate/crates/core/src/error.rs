use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("class `{class}` cannot be split: {detail}")]
    ClassTooSmall { class: String, detail: String },

    #[error("insufficient data for episode: {0}")]
    InsufficientData(String),

    #[error("class group {0} is empty")]
    EmptyGroup(usize),

    #[error("label {label} outside class order of size {n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("no evaluation episodes")]
    NoEpisodes,

    #[error("no samples")]
    NoSamples,

    #[error("non-finite loss at epoch {epoch}, episode {episode}")]
    NonFiniteLoss { epoch: usize, episode: usize },

    #[error("query misalignment: {0}")]
    Misaligned(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("I/O error: {0}")]
    Io(std::io::Error),

    #[error("JSON error: {0}")]
    Json(serde_json::Error),
}

// Manual conversions keep the inner error out of `source()`, so chained
// displays do not repeat its message.
impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

/// Errors raised by the binary readers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("unexpected end of payload")]
    Truncated,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("malformed payload: {0}")]
    Malformed(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
