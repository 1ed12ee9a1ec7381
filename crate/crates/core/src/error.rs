use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// No single-sector removal reconciles the estimate with the scan.
    #[error("no sector removal makes the scan consistent with the estimate")]
    NoConsistentSector,

    /// Every estimator was excluded by the trust criteria.
    #[error("all estimators were excluded by the trust criteria")]
    EmptyTrust,

    /// The configured barrier certificate failed grid verification.
    #[error("certificate verification failed: {0}")]
    CertificateRejected(String),

    #[error(
        "constrained solver did not converge after {iterations} iterations (step {last_step:e})"
    )]
    SolverDiverged { iterations: usize, last_step: f64 },
}
