use thiserror::Error;

use crate::point::Point2;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no exit: point {0} is still inside the patch")]
    NoExit(Point2),

    #[error("diffusion matrix not positive definite at {point}: [[{a_xx}, {a_xy}], [{a_xy}, {a_yy}]]")]
    NotPositiveDefinite {
        point: Point2,
        a_xx: f64,
        a_xy: f64,
        a_yy: f64,
    },

    #[error("RBF interpolation matrix is numerically singular (condition number {0:.3e})")]
    SingularInterpolation(f64),

    #[error("shape parameter bracket not found: condition numbers span [{low:.3e}, {high:.3e}], target {target:.3e}")]
    ShapeBracket { low: f64, high: f64, target: f64 },

    #[error("non-finite value while integrating trajectory at {0}")]
    NonFinite(Point2),

    #[error("trajectory exceeded {0} steps")]
    MaxSteps(usize),

    #[error("too many runaway trajectories: {failed} of {total}")]
    TooManyFailures { failed: u64, total: u64 },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("exit on {0} side has no stencil")]
    MissingStencil(String),

    #[error("singular matrix: zero pivot at column {0}")]
    SingularMatrix(usize),

    #[error("iterative solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("point {0} lies outside the domain")]
    OutsideDomain(Point2),

    #[error("job {job} failed {attempts} times: {cause}")]
    JobFailed {
        job: String,
        attempts: u32,
        cause: String,
    },

    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown problem '{0}'")]
    UnknownProblem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_phase(self, phase: &'static str) -> Error {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
