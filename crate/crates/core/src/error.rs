use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("x = {x} lies outside the state space ({lo}, {hi})")]
    Domain { x: f64, lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("generator order {0} is not supported (maximum is 2)")]
    UnsupportedOrder(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate predictor: variance {0:e} under the invariant law")]
    DegeneratePredictor(f64),

    #[error("identifiability: {0}")]
    Identifiability(String),

    #[error("simulated path left the state space at index {index} (value {value})")]
    Simulation { index: usize, value: f64 },

    #[error("Jacobian is numerically singular (condition number {0:e})")]
    NearSingular(f64),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("configuration: {0}")]
    Config(String),

    #[error("not available: {0}")]
    NotAvailable(String),

    #[error("integration by parts boundary term does not vanish: {0}")]
    BoundaryTerm(String),

    #[error("assembly: {0}")]
    Assembly(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("serialization: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
