use thiserror::Error;

use crate::kvmodel::format::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("degenerate row {row}: norm below 1e-12")]
    DegenerateRow { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation failed at layer {layer}{}: {detail}", head.map(|h| format!(", head {h}")).unwrap_or_default())]
    Validation {
        layer: usize,
        head: Option<usize>,
        detail: String,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("unsupported decode path: {0}")]
    UnsupportedPath(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(detail: impl Into<String>) -> Self {
        Error::Parameter(detail.into())
    }

    pub(crate) fn validation(layer: usize, head: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Validation {
            layer,
            head,
            detail: detail.into(),
        }
    }

    /// True for errors raised by numerical routines (non-convergence, divergence,
    /// non-finite values), as opposed to malformed inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Diverged { .. })
    }
}
