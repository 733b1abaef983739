use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),

    #[error("invalid layer name `{0}`")]
    InvalidName(String),

    #[error("unknown layer `{name}` (available: {})", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("unknown channel `{name}` (available: {})", available.join(", "))]
    UnknownChannel { name: String, available: Vec<String> },

    #[error("cell ({row}, {col}) is outside a {rows}x{cols} grid")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("algorithm `{algorithm}` cannot fuse {semantics} channel `{channel}`")]
    SemanticsMismatch {
        algorithm: &'static str,
        channel: String,
        semantics: &'static str,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("plugin `{plugin}`: {message}")]
    Plugin { plugin: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short, stable category name used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidGeometry(_) => "geometry",
            Error::DuplicateLayer(_) | Error::InvalidName(_) => "layer-name",
            Error::UnknownLayer { .. } => "unknown-layer",
            Error::UnknownChannel { .. } => "unknown-channel",
            Error::IndexOutOfRange { .. } => "out-of-range",
            Error::InvalidPose(_) => "pose",
            Error::InvalidIntrinsics(_) => "intrinsics",
            Error::InvalidInput(_) => "input",
            Error::InvalidConfig(_) => "config",
            Error::SemanticsMismatch { .. } => "semantics",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Plugin { .. } => "plugin",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}
