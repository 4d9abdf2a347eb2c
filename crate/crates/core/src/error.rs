use thiserror::Error;

/// Errors from parsing and evaluating scalar expressions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier '{name}' at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("unbound variable '{0}'")]
    UnboundVariable(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("evaluation produced a non-finite value")]
    NonFinite,
    #[error("'{0}' has no exact rational value at this argument")]
    NotRational(String),
    #[error("invalid chart: {0}")]
    InvalidChart(String),
}

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degree mismatch: {0}")]
    DegreeMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("evaluation failed at {location}: {source}")]
    EvalAt { location: String, source: ExprError },
    #[error("invalid quadrature configuration: {0}")]
    Quadrature(String),
    #[error("series did not converge: {0}")]
    NonConvergence(String),
    #[error("inverse check failed: residual {0:e}")]
    InverseCheck(f64),
    #[error("reparametrization is not monotone: {0}")]
    NotMonotone(String),
    #[error("incompatible endpoints: {0}")]
    IncompatibleEndpoints(String),
}

impl Error {
    pub(crate) fn eval_at(point: &[f64], source: ExprError) -> Error {
        Error::EvalAt { location: format!("{point:?}"), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
