use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geotransform: {0}")]
    InvalidTransform(String),

    #[error("image {width}x{height} is smaller than patch size {patch_size}")]
    ImageTooSmall { width: u32, height: u32, patch_size: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("herd `{herd}` cannot be covered: {reason}")]
    InfeasibleSplit { herd: String, reason: String },

    #[error("animal placement failed after {attempts} attempts ({placed} of {requested} placed)")]
    Placement {
        attempts: usize,
        placed: usize,
        requested: usize,
    },

    #[error("unknown benchmark suite `{0}`")]
    UnknownSuite(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
