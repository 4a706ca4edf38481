use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    /// `1 + beta * var_k * c1(x) * dJ/dC` fell to or below the guard floor, so the
    /// tilted Gaussian for component `component` is improper.
    #[error("curvature collapse in component {component}: 1 + beta*var*c1*J_C = {value:e}")]
    CurvatureCollapse { component: usize, value: f64 },

    #[error("degenerate cost: {0}")]
    DegenerateCost(String),

    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergent(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("at x = {x:?}, C = {cost}, t = {t}: {source}")]
    AtState {
        x: Vec<f64>,
        cost: f64,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Innermost error, looking through trajectory and state annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Trajectory { source, .. } | Error::AtState { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
