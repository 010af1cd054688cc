use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("label {index} out of range for {classes} classes")]
    Label { index: usize, classes: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported version {found} at byte {offset} (expected {expected})")]
    Version {
        offset: usize,
        found: u32,
        expected: u32,
    },

    #[error("non-finite loss or gradient at step {step}")]
    NanLoss { step: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } | Error::Label { .. } => 2,
            Error::Data(_) | Error::Format { .. } | Error::Version { .. } | Error::Io(_) => 3,
            Error::NanLoss { .. } => 4,
            Error::Evaluation(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
