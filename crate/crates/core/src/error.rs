//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A domain object failed its construction-time invariants.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Array shapes of two arguments do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A linear solve or iterative method left a residual above tolerance.
    #[error("numerical failure in {what}: residual {residual:e} exceeds tolerance")]
    NumericalFailure { what: String, residual: f64 },

    /// An iterative solver ran out of its iteration budget.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// The forward-KL adaptation requires the regularization weight to
    /// dominate the advantage range.
    #[error("lambda too small: lambda = {lambda} but max |advantage| = {max_abs_adv}")]
    LambdaTooSmall { lambda: f64, max_abs_adv: f64 },

    /// The linear-feature adaptation requires strong concavity.
    #[error("lambda below concavity threshold: lambda = {lambda}, threshold = {threshold}")]
    LambdaBelowConcavity { lambda: f64, threshold: f64 },

    /// Curvature of the lower-level objective has the wrong sign.
    #[error("concavity condition violated: {0}")]
    ConcavityViolated(String),

    /// The per-state regularizer Hessian is singular.
    #[error("singular regularizer Hessian at state {state}")]
    SingularHessian { state: usize },

    /// Sampled-surrogate adaptation received no data.
    #[error("empty batch")]
    EmptyBatch,

    /// Gridworld generation exhausted its retry budget.
    #[error("task generation failed: {0}")]
    Generation(String),

    /// The state-visitation floor is zero somewhere, so quantities that
    /// divide by it are undefined. Mixing a little uniform mass into the
    /// initial distribution restores a positive floor.
    #[error("sufficient-state-visit assumption violated: {0}")]
    VisitFloorViolated(String),

    /// A degenerate configuration (for example zero advantage range) makes a
    /// derived hyperparameter undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Failure at a specific step of a repeated adaptation.
    #[error("adaptation step {step} failed: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(step: usize, source: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
