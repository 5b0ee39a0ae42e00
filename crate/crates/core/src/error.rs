use std::fmt;

use crate::tensor_store::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Header or manifest could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    /// Manifest parsed, but the payload layout is inconsistent.
    #[error("corrupt container: {0}")]
    Corruption(String),

    #[error("validation failed: {}", ViolationList(.0))]
    Validation(Vec<Violation>),

    /// Input has fewer than three distinct values (or is empty).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("execution error in layer `{layer}`: {message}")]
    Execution { layer: String, message: String },

    #[error("comparison error: {0}")]
    Comparison(String),
}

impl Error {
    pub(crate) fn exec(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Execution {
            layer: layer.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the filesystem rather than model content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

struct ViolationList<'a>(&'a [Violation]);

impl fmt::Display for ViolationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
