//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LnsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument for {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("config error at {path}:{line} (key `{key}`): {msg}")]
    Config {
        path: String,
        line: usize,
        key: String,
        msg: String,
    },

    #[error("malformed {format} data at byte offset {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("noise rates invalid: rho_pos={rho_pos}, rho_neg={rho_neg} (need both >= 0 and sum < 1)")]
    InvalidRates { rho_pos: f64, rho_neg: f64 },

    #[error("training diverged at epoch {epoch}: loss was NaN for 3 consecutive steps")]
    Diverged { epoch: usize },

    #[error("{0}")]
    Msg(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LnsError>;

impl LnsError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LnsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn msg(m: impl Into<String>) -> Self {
        LnsError::Msg(m.into())
    }
}
