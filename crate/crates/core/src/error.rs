use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("singular matrix: {0}")]
    Singular(&'static str),
    #[error("rank deficient matrix: {0}")]
    RankDeficient(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("step size underflow at t = {t}: h = {h:e} (span {span:e})")]
    StepUnderflow { t: f64, h: f64, span: f64 },
    #[error("maximum number of steps ({max_steps}) exceeded at t = {t}")]
    MaxSteps { max_steps: usize, t: f64 },
    #[error("backward state reconstruction diverged: deviation {deviation:e} exceeds {limit:e}")]
    Irreversible { deviation: f64, limit: f64 },
    #[error("training aborted: {failed} of {total} samples failed ({first})")]
    BatchFailure {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
