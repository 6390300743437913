use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The CLI maps [`Error::Numeric`] to exit code 2 and everything else to 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite or diverging arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }

    /// Prefixes a numeric error with extra context (e.g. the failing time).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::NonFinite { op } => Error::NonFinite {
                op: format!("{op} ({ctx})"),
            },
            Error::Numeric(m) => Error::Numeric(format!("{m} ({ctx})")),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
