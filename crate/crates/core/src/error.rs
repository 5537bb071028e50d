use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension { context: &'static str, expected: String, actual: String },

    #[error("gradient descent diverged at iteration {iteration} with step size eta = {eta:e} (loss {previous:e} -> {current:e})")]
    Divergence { eta: f64, iteration: usize, previous: f64, current: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dims(
    context: &'static str,
    expected: impl std::fmt::Display,
    actual: impl std::fmt::Display,
    ok: bool,
) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension { context, expected: expected.to_string(), actual: actual.to_string() })
    }
}
