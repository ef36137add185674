use thiserror::Error;

/// Errors raised anywhere in the attack lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range 0..{len} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unknown format version {0}")]
    UnknownVersion(u8),

    #[error("corrupt payload for {id:?}: expected {expected} bytes, found {found}")]
    CorruptPayload {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("stale flip record entry {index} ({id}[{element}] bit {bit}): {msg}")]
    StaleRecord {
        index: usize,
        id: String,
        element: usize,
        bit: u8,
        msg: String,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Wraps an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the CLI, one per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Input(_) => 3,
            Error::Format { .. }
            | Error::BadMagic { .. }
            | Error::UnknownVersion(_)
            | Error::CorruptPayload { .. } => 4,
            Error::Incompatible(_) | Error::StaleRecord { .. } => 5,
            Error::Dimension { .. } | Error::Index { .. } => 6,
            Error::Io(_) | Error::Json(_) => 7,
        }
    }
}
