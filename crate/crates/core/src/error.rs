use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Pooling/convolution geometry that cannot be realised (indivisible dims, empty output).
    #[error("{op}: invalid geometry: {detail}")]
    Geometry { op: &'static str, detail: String },

    /// Invalid model or command configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Config file syntax problem, reported with a 1-based line number.
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    /// Autodiff misuse, e.g. backward on a tape that never recorded the output.
    #[error("state error: {0}")]
    State(String),

    /// A NaN or infinity showed up where a finite value was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed binary input (image or checkpoint), with the byte offset of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn geometry(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Geometry {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Attach the path to an I/O failure.
    pub(crate) fn io_at(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
    }

    /// Process exit code for this failure class: 2 config, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ConfigLine { .. }
            | Error::Shape { .. }
            | Error::Geometry { .. } => 2,
            Error::Format { .. } | Error::Io(_) => 3,
            Error::Numeric(_) | Error::State(_) => 4,
        }
    }
}
