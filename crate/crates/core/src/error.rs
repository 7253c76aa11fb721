use thiserror::Error;

use crate::dump::SplitKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },

    #[error("line {line}: schema mismatch: {message}")]
    Schema { line: usize, message: String },

    #[error("image {image_id} detection {detection}: missing field `{field}`")]
    MissingField {
        image_id: String,
        detection: usize,
        field: &'static str,
    },

    #[error("image {image_id}: missing `{field}`")]
    MissingRecordField { image_id: String, field: &'static str },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance is singular after shrinkage")]
    SingularCovariance,

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("expected a dump with split_kind {expected}, found {found}")]
    SplitMismatch { expected: String, found: SplitKind },

    #[error("zero baseline for split `{0}`")]
    ZeroBaseline(String),

    #[error("inconsistent headers: {0}")]
    InconsistentHeaders(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("image id collision: {0}")]
    IdCollision(String),

    #[error("unknown image id: {0}")]
    UnknownImage(String),

    #[error("invalid model sidecar: {0}")]
    Sidecar(String),
}

impl Error {
    pub fn file(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::File { path, source }
    }

    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::File { .. } => "io",
            Error::Syntax { .. } => "syntax",
            Error::Schema { .. } => "schema",
            Error::MissingField { .. } => "missing_field",
            Error::MissingRecordField { .. } => "missing_field",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::EmptyInput(_) => "empty_input",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::SingularCovariance => "singular_covariance",
            Error::InsufficientData(_) => "insufficient_data",
            Error::SplitMismatch { .. } => "split_mismatch",
            Error::ZeroBaseline(_) => "zero_baseline",
            Error::InconsistentHeaders(_) => "inconsistent_headers",
            Error::Degenerate(_) => "degenerate",
            Error::IdCollision(_) => "id_collision",
            Error::UnknownImage(_) => "unknown_image",
            Error::Sidecar(_) => "sidecar",
        }
    }
}
