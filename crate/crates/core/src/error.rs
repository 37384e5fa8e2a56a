use thiserror::Error;

/// Errors produced while loading, fitting or simulating SMART data.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("row {row} ({id}): {message}")]
    InvalidRow { row: usize, id: String, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{what} did not converge in {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("separation in assignment model: {0}")]
    Separation(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("every replication failed; first error: {0}")]
    AllReplicationsFailed(String),

    #[error("variance method `{0}` is not available for this fit")]
    MissingVariance(String),
}

impl Error {
    /// True for failures of the numerical routines rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NonConvergence { .. }
                | Error::Separation(_)
                | Error::RankDeficient(_)
                | Error::AllReplicationsFailed(_)
        )
    }

    pub(crate) fn row(row: usize, id: &str, message: impl Into<String>) -> Self {
        Error::InvalidRow {
            row,
            id: id.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
