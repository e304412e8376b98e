use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate rays: smallest eigenvalue {min_eigenvalue:e} of the normal matrix is below threshold")]
    DegenerateRays { min_eigenvalue: f64 },

    #[error("degenerate anchor: anchor point is {distance:e} from the first camera center")]
    DegenerateAnchor { distance: f64 },

    #[error("invalid camera pose: {0}")]
    InvalidPose(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("bad config `{key}`: {reason}")]
    BadConfig { key: String, reason: String },

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn bad_config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::BadConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
