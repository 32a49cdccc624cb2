//! Crate-wide error type.

use std::path::PathBuf;

/// Everything that can fail across the simulation and analysis chain.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no ballistic arrival: {0}")]
    NoArrival(String),

    #[error("ground state not converged after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("grid too small: boundary density is {boundary:.3e} of peak (limit {limit:.1e})")]
    GridTooSmall { boundary: f64, limit: f64 },

    #[error("{path}:{line}: malformed row: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("singular curvature matrix in least-squares solve")]
    SingularFit,

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config write: {0}")]
    ConfigWrite(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
