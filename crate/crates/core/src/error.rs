use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{what} did not converge after {iterations} iterations (last change {residual:.3e})")]
    IterationFailure {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("degenerate nonlocal boundary closure at x = {x} (coefficient {coefficient:.3e})")]
    DegenerateBoundary { x: f64, coefficient: f64 },

    #[error("kernel solve failed at delay node {index} (D = {delay}): {source}")]
    DelayNode {
        index: usize,
        delay: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("state diverged at t = {t}: {detail}")]
    Divergence { t: f64, detail: String },

    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
