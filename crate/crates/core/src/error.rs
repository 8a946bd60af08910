use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("degenerate sample: all paired differences are zero")]
    DegenerateSample,
    #[error("reference dose is zero for {0}")]
    ZeroReferenceDose(String),
    #[error("dose grid does not overlap the target grid")]
    NoOverlap,
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
