use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report, grouped by family so that front ends
/// can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    // -- dynamics
    #[error("state left the simplex or became non-finite at t = {t}: s = {s}, i = {i}, r = {r}")]
    NonFiniteState { t: f64, s: f64, i: f64, r: f64 },
    #[error("equilibrium initial condition is singular (|q0 - 1| = {gap:e})")]
    DegenerateEquilibrium { gap: f64 },
    #[error("invalid epidemic state: {0}")]
    InvalidState(String),
    #[error("contact rate requested at t = {t} outside the lockdown support (t_end = {t_end})")]
    OutOfSupport { t: f64, t_end: f64 },

    // -- estimation
    #[error("no residuals supplied")]
    EmptyResiduals,
    #[error("observation series carries no signal (all counts are zero)")]
    NoSignal,
    #[error("optimizer stalled: {0}")]
    OptimizerStalled(String),
    #[error("refinement schedule exhausted without meeting tol (last change {last_change:e})")]
    NotConverged { last_change: f64 },
    #[error("Hessian at the mode is not positive definite for any candidate width")]
    SingularHessian,

    // -- sampling
    #[error("initial parameter vector has zero posterior density")]
    InvalidInit,
    #[error("proposal covariance is degenerate (zero trace or not PSD)")]
    DegenerateProposal,
    #[error("pilot tuning did not reach the acceptance band after {rounds} rounds (last rate {rate:.3})")]
    TuningFailed { rounds: usize, rate: f64 },
    #[error("chain too short: {retained} retained samples, need at least {needed}")]
    ChainTooShort { retained: usize, needed: usize },

    // -- data
    #[error("schema mismatch in {path}: missing column `{column}`")]
    SchemaMismatch { path: PathBuf, column: String },
    #[error("dates are not contiguous: {before} is followed by {after}")]
    GapInDates { before: String, after: String },
    #[error("negative count {count} on {date}")]
    NegativeCount { date: String, count: i64 },
    #[error("window {start}..={end} selects no observations")]
    EmptyWindow { start: String, end: String },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("malformed input: {0}")]
    Parse(String),

    // -- contracts
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }

    /// Coarse family used by the CLI to pick an exit code.
    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            NonFiniteState { .. } | DegenerateEquilibrium { .. } | InvalidState(_) | OutOfSupport { .. } => {
                ErrorFamily::Dynamics
            }
            NoSignal => ErrorFamily::NoSignal,
            EmptyResiduals | OptimizerStalled(_) | NotConverged { .. } | SingularHessian => ErrorFamily::Estimation,
            InvalidInit | DegenerateProposal | TuningFailed { .. } | ChainTooShort { .. } => ErrorFamily::Sampling,
            SchemaMismatch { .. } | GapInDates { .. } | NegativeCount { .. } | EmptyWindow { .. } | Parse(_) => {
                ErrorFamily::Data
            }
            Io { .. } | Csv { .. } => ErrorFamily::Io,
            Precondition(_) => ErrorFamily::Precondition,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Dynamics,
    NoSignal,
    Estimation,
    Sampling,
    Data,
    Io,
    Precondition,
}
