use std::path::Path;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint corrupt at byte {offset}: {detail}")]
    CheckpointCorrupt { offset: u64, detail: String },

    #[error("checkpoint version mismatch: file version {found}, supported version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("non-finite loss at step {step}; last finite loss was {last_finite}")]
    NonFiniteLoss { step: u64, last_finite: f64 },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{path}: {detail}")]
    Image { path: String, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Toml(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
