use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error at index {index}: {msg}")]
    Domain { index: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error in {context}: {msg}")]
    Numeric { context: String, msg: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn numeric(context: impl fmt::Display, msg: impl fmt::Display) -> Self {
        Error::Numeric {
            context: context.to_string(),
            msg: msg.to_string(),
        }
    }

    pub fn format(offset: usize, msg: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            msg: msg.to_string(),
        }
    }

    /// Prefixes the error message with where it happened (layer index, level, ...).
    pub fn context(self, ctx: impl fmt::Display) -> Self {
        match self {
            Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Singularity(m) => Error::Singularity(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Domain { index, msg } => Error::Domain {
                index,
                msg: format!("{ctx}: {msg}"),
            },
            Error::Numeric { context, msg } => Error::Numeric {
                context: format!("{ctx}: {context}"),
                msg,
            },
            other => other,
        }
    }
}
