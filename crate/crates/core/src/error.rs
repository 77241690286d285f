use thiserror::Error;

/// Errors raised across the valuation lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A rollout left the overflow guard; `step` is the index of the first offending state.
    #[error("rollout diverged at step {step}")]
    Divergence { step: usize },

    #[error("trajectory {id} has no actuation-noise record")]
    MissingNoise { id: usize },

    #[error("empty coalition")]
    EmptyCoalition,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("exact enumeration refused for {n} players (limit {limit})")]
    TooManyPlayers { n: usize, limit: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
