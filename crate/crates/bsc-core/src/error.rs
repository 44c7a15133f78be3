use thiserror::Error;

/// Errors produced across the library.
#[derive(Error, Debug)]
pub enum BscError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV parse error in {path}: {msg}")]
    Csv { path: String, msg: String },

    #[error("ragged panel: {0}")]
    RaggedPanel(String),

    #[error("unknown society {0:?}")]
    UnknownSociety(String),

    #[error("treatment start year {0} invalid: {1}")]
    BadTreatmentStart(i32, String),

    #[error("deflator missing year {0}")]
    DeflatorMissingYear(i32),

    #[error("nonpositive deflator value {value} for year {year}")]
    NonpositiveDeflator { year: i32, value: f64 },

    #[error("society index {index} out of range for J={j}")]
    SocietyIndexOutOfRange { index: usize, j: usize },

    #[error("panel has no comparison pool (J={0})")]
    NoComparisonPool(usize),

    #[error("unknown preset {0:?}")]
    UnknownPreset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperParam(String),

    #[error("PCA error: {0}")]
    Pca(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("no treated cells in panel")]
    NoTreatedCells,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, BscError>;
