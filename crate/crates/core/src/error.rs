use std::io;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
///
/// The variants mirror the failure classes callers need to distinguish:
/// a bad configuration is the user's to fix (CLI exit code 1), everything
/// else is a runtime failure (exit code 2).
#[derive(Debug, Error)]
pub enum FeloError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FeloError>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl FeloError {
    pub fn config(msg: impl Into<String>) -> Self {
        FeloError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        FeloError::Data(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        FeloError::Protocol(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        FeloError::Usage(msg.into())
    }

    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        FeloError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the round number to an error raised while executing a round.
    pub fn in_round(self, round: usize) -> Self {
        match self {
            e @ FeloError::Round { .. } => e,
            e => FeloError::Round {
                round,
                source: Box::new(e),
            },
        }
    }

    /// True when the root cause is a configuration problem.
    pub fn is_config(&self) -> bool {
        match self {
            FeloError::Config(_) => true,
            FeloError::Round { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, FeloError>;
