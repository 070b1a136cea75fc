//! Error type shared by all simulator modules.

use std::path::PathBuf;

/// Errors surfaced by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid parameters, shapes, or incompatible model specs.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid dataset contents (labels out of range, malformed files, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values produced during a forward/backward/update pass.
    #[error("numerical failure at layer {layer}: {detail}")]
    Numerical { layer: usize, detail: String },

    /// Step allocation could not be computed.
    #[error("scheduling error: {0}")]
    Scheduling(String),

    /// Model averaging over an empty or inconsistent set.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Metric evaluation over an unusable test set.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A local update failed; carries the round/client where it happened.
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach round/client context to an error bubbling out of a local update.
    pub fn in_client(self, round: usize, client: usize) -> Self {
        Error::Client {
            round,
            client,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
