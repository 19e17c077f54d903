use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("elliptic operator not coercive: c = {c} must exceed {bound}")]
    NonCoercive { c: f64, bound: f64 },

    #[error("singular linear system")]
    Singular,

    #[error("state diverged at t = {time}: sup norm {norm:e}")]
    Divergence { time: f64, norm: f64 },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    CgFailure { iterations: usize, residual: f64 },

    #[error("fixed-point map is not contracting (ratios {ratios:?}); {suggestion}")]
    NonContraction {
        ratios: Vec<f64>,
        suggestion: String,
    },

    #[error("control failed on interval {interval}: {source}")]
    Interval {
        interval: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Innermost error, looking through interval wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Interval { source, .. } => source.root(),
            e => e,
        }
    }
}
