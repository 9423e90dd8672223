use thiserror::Error;

/// Errors raised by structure construction, estimation and reconciliation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} is empty")]
    Empty { what: String },

    #[error("{what} contains non-finite entries")]
    NonFinite { what: String },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: String,
        found: String,
    },

    #[error("constraint matrix is rank deficient: rank {rank} < {rows} rows ({cols} columns)")]
    RankDeficient {
        rank: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid aggregation order: {0}")]
    AggregationOrder(String),

    #[error("unsupported estimator: {0}")]
    UnsupportedEstimator(String),

    #[error("estimator `{estimator}` is not available for the {framework} framework")]
    EstimatorFramework {
        estimator: String,
        framework: String,
    },

    #[error("estimator `{0}` requires residuals (res)")]
    MissingResiduals(String),

    #[error("need at least {needed} residual rows, found {found}")]
    TooFewRows { needed: usize, found: usize },

    #[error("invalid weights: {0}")]
    Weights(String),

    #[error("invalid id_rows: {0}")]
    IdRows(String),

    #[error("invalid option: {0}")]
    Options(String),

    #[error("{what} is not positive definite (pivot {index}, condition estimate {condition:.3e})")]
    NotPositiveDefinite {
        what: String,
        index: usize,
        condition: f64,
    },

    #[error("immutable forecasts are infeasible: fixed values violate the constraints (residual {residual:.3e})")]
    InfeasibleImmutable { residual: f64 },

    #[error("bounds are infeasible: {0}")]
    InfeasibleBounds(String),

    #[error("solver did not converge after {iterations} iterations (primal residual {primal:.3e}, dual residual {dual:.3e})")]
    NotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("block principal pivoting failed to terminate after {iterations} iterations")]
    Cycling { iterations: usize },

    #[error("draw {index}: {source}")]
    Draw {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("feature mismatch, missing columns: {}", .missing.join(", "))]
    FeatureMismatch { missing: Vec<String> },

    #[error("training data: {0}")]
    Training(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    /// `true` for failures of the numerical machinery (as opposed to invalid input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::InfeasibleImmutable { .. }
            | Error::InfeasibleBounds(_)
            | Error::NotConverged { .. }
            | Error::Cycling { .. } => true,
            Error::Draw { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
