use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cannot normalize sensor `{sensor}`: max equals min")]
    Normalization { sensor: String },

    #[error("invalid mask spec: {0}")]
    MaskSpec(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("generator error: {0}")]
    Generator(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint manifest mismatch on `{field}`: checkpoint has {found}, config wants {expected}")]
    ManifestMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Process exit codes by error class.
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl Error {
    /// 1 for configuration and checkpoint problems, 2 for data and I/O,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ManifestMismatch { .. }
            | Error::Checkpoint(_)
            | Error::MaskSpec(_)
            | Error::Schedule(_)
            | Error::Generator(_)
            | Error::UnknownParam(_) => EXIT_CONFIG,
            Error::Parse { .. }
            | Error::Dataset(_)
            | Error::Normalization { .. }
            | Error::Graph(_)
            | Error::Split(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Metric(_) => EXIT_DATA,
            Error::InvalidShape { .. }
            | Error::ShapeMismatch { .. }
            | Error::Contract(_)
            | Error::NonFinite { .. }
            | Error::Diverged { .. } => EXIT_NUMERIC,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
