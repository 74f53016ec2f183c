use std::path::PathBuf;

/// Errors produced by the recognition engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what} {index} has zero norm")]
    ZeroNorm { what: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("support set: {0}")]
    InvalidSupport(String),

    #[error("no prototype for class {0}")]
    MissingPrototype(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("dataset has {available} classes, episode needs {required}")]
    InsufficientClasses { available: usize, required: usize },

    #[error("class {label} has {available} items, episode needs {required}")]
    InsufficientItems {
        label: usize,
        available: usize,
        required: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("bad magic {found:?}, expected \"FSOF\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("non-finite value at item {item}, offset {offset}")]
    NonFiniteValue { item: usize, offset: usize },

    #[error("heatmap value {value} at cell {index} outside [0, 1]")]
    HeatmapRange { value: f64, index: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
