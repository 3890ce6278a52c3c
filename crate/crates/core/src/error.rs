//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes must agree do not.
    #[error("dimension mismatch in {context}: {left_name} is {left_dims}, {right_name} is {right_dims}")]
    Dimension {
        context: &'static str,
        left_name: &'static str,
        left_dims: String,
        right_name: &'static str,
        right_dims: String,
    },

    #[error("invalid input in {context}: {message}")]
    Invalid { context: &'static str, message: String },

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    /// Tightening consumed the whole constraint set: some component of
    /// `h - q_l` is nonpositive.
    #[error(
        "tightened set has no interior at step {step}, row {row}: h - q = {slack:.6e}; \
         increase epsilon or pick a gain with smaller closed-loop error gain"
    )]
    InteriorLoss { step: usize, row: usize, slack: f64 },

    #[error("rejection sampler failed in {context}: {attempts} proposals without acceptance")]
    Sampler { context: &'static str, attempts: usize },

    #[error(
        "QP solver failed ({status}): {iterations} iterations, primal residual {primal:.3e}, \
         dual residual {dual:.3e}"
    )]
    SolverFailure {
        status: &'static str,
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("scenario {scenario_index} failed: {source}")]
    Scenario {
        scenario_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {message}")]
    Config { message: String },

    #[error("missing artifact: expected file {path}")]
    MissingArtifact { path: String },

    #[error("selection policy unsatisfiable: {message}")]
    Policy { message: String },

    #[error("unsupported: {message}")]
    Unsupported { message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dims(
        context: &'static str,
        left_name: &'static str,
        left: (usize, usize),
        right_name: &'static str,
        right: (usize, usize),
    ) -> Self {
        Error::Dimension {
            context,
            left_name,
            left_dims: format!("{}x{}", left.0, left.1),
            right_name,
            right_dims: format!("{}x{}", right.0, right.1),
        }
    }

    pub(crate) fn invalid(context: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            context,
            message: message.into(),
        }
    }
}
