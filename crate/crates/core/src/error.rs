use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Every importance weight underflowed; the particles carry no information about the query point.
    #[error("no support: all {n} importance weights vanish at t = {t}, x = {x}")]
    NoSupport { n: usize, t: f64, x: f64 },

    /// Adaptive quadrature failed to reach the requested tolerance.
    #[error("quadrature did not converge: estimate {value:e}, error {error:e} after {intervals} intervals")]
    Quadrature {
        value: f64,
        error: f64,
        intervals: usize,
    },

    /// A least-squares problem is singular or too badly conditioned to solve.
    #[error("rank deficient least-squares problem: {0}")]
    RankDeficient(String),

    /// A root bracket could not be established.
    #[error("root bracketing failed: {0}")]
    Bracket(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
