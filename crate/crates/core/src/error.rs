use std::fmt;

/// Errors raised anywhere in the detector pipeline.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not agree.
    Shape(String),
    /// An op produced NaN or infinity.
    NonFinite { op: &'static str },
    /// Convolution kernels must have odd width for same-padding.
    EvenKernel(usize),
    /// `backward` was called on a tensor with more than one element.
    NotScalar(Vec<usize>),
    /// `backward` was called on a value that depends on no tracked input.
    Detached,
    /// The same graph was differentiated twice.
    BackwardTwice,
    /// A parameter already holds a gradient from an earlier backward pass.
    GradientPending(String),
    /// An optimizer step was requested for a parameter without a gradient.
    MissingGradient(String),
    /// Input values lie outside the normalized range.
    Unnormalized { value: f64 },
    InvalidConfig(String),
    InvalidData(String),
    /// A collection that must be non-empty was empty.
    Empty(&'static str),
    /// A ranking metric needs both classes.
    SingleClass,
    Checkpoint(String),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, source: Box<Error> },
    /// Wraps another error with the index of the item that failed.
    AtIndex { index: usize, source: Box<Error> },
    Io(std::io::Error),
    Json(serde_json::Error),
    Csv(csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }

    /// True for errors caused by bad input data or files rather than by
    /// numerical failure.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::InvalidData(_)
            | Error::Unnormalized { .. }
            | Error::Empty(_)
            | Error::SingleClass
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => true,
            Error::AtIndex { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::EvenKernel(k) => write!(f, "kernel width {k} is even; same-padding needs odd widths"),
            Error::NotScalar(shape) => write!(f, "backward needs a scalar loss, got shape {shape:?}"),
            Error::Detached => write!(f, "loss does not depend on any tracked value"),
            Error::BackwardTwice => write!(f, "backward already ran on this graph"),
            Error::GradientPending(name) => {
                write!(f, "parameter {name} still holds a gradient; step or reset first")
            }
            Error::MissingGradient(name) => write!(f, "parameter {name} has no gradient"),
            Error::Unnormalized { value } => {
                write!(f, "input value {value} lies outside the normalized range [0, 1]")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Error::Empty(what) => write!(f, "{what} is empty"),
            Error::SingleClass => write!(f, "metric needs both normal and abnormal samples"),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::Diverged { epoch, source } => write!(f, "training diverged in epoch {epoch}: {source}"),
            Error::AtIndex { index, source } => write!(f, "item {index}: {source}"),
            Error::Io(e) => write!(f, "io: {e}"),
            Error::Json(e) => write!(f, "json: {e}"),
            Error::Csv(e) => write!(f, "csv: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::AtIndex { source, .. } | Error::Diverged { source, .. } => Some(source.as_ref()),
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            Error::Csv(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}
