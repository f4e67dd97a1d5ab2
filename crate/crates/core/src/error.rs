use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid table: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported scaling: {0}")]
    UnsupportedScaling(String),

    #[error("IRLS did not converge after {iterations} iterations")]
    Convergence { iterations: usize, last_coefficients: Vec<f64> },

    #[error("design matrix is not of full column rank: {0}")]
    Design(String),

    #[error("no feasible starting values: {0}")]
    StartValue(String),

    #[error("{rows} rows leave no residual degrees of freedom for {params} parameters")]
    DegreesOfFreedom { rows: usize, params: usize },

    #[error("model fit has not converged")]
    NotConverged,

    #[error("influence rows do not align: expected {expected}, found {found}")]
    Alignment { expected: usize, found: usize },

    #[error("component `{0}` has zero variance")]
    DegenerateComponent(String),

    #[error("invalid correlation matrix: {0}")]
    Matrix(String),

    #[error("quantile search failed: {0}")]
    Search(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. }
                | Error::Design(_)
                | Error::StartValue(_)
                | Error::NotConverged
                | Error::DegenerateComponent(_)
                | Error::Matrix(_)
                | Error::Search(_)
                | Error::Degenerate(_)
        )
    }
}
