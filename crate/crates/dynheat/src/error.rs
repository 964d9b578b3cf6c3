//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user-supplied configuration (mesh sizes, regions, parameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// An internal contract between components was violated (shape mismatch etc.).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Expression syntax error, with a byte offset into the source string.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Sampled diffusion tensor is not uniformly elliptic.
    #[error("ellipticity violation: minimum eigenvalue {min_eig} at {location}")]
    EllipticityViolation { min_eig: f64, location: String },

    /// A coefficient or expression evaluated to NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Dense factorization hit an exactly zero pivot.
    #[error("singular matrix of dimension {dim}")]
    SingularMatrix { dim: usize },

    /// Time-stepping matrix could not be factored at the given level.
    #[error("singular step matrix at time level {level}")]
    SingularStepMatrix { level: usize },

    /// An iterative solve did not reach its tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// An iterate of an outer loop became non-finite.
    #[error("non-finite iterate in {0}")]
    NonFiniteIterate(String),

    /// The weighted target norm is not integrable: the target does not decay
    /// fast enough toward the final time.
    #[error("weighted norm of the target diverges: {0}")]
    RhoWeightInfinite(String),

    /// The sampled field vanishes on the observation region beyond the
    /// floating-point floor, so a quotient cannot be formed.
    #[error("denominator underflow: {0}")]
    DenominatorUnderflow(String),

    /// The auxiliary landscape function's critical point fell outside the
    /// allowed interior region.
    #[error("critical point at x = {x} lies outside the designated interior region")]
    CriticalPointOutsideOmegaPrime { x: f64 },

    /// The auxiliary landscape function has more than one interior critical point.
    #[error("found {count} interior critical points, expected exactly one")]
    MultipleCriticalPoints { count: usize },

    /// A nonlinear per-step fixed point failed to converge.
    #[error("per-step iteration did not converge at step {step} (residual {residual})")]
    PerStepNoConvergence { step: usize, residual: f64 },

    /// An outer fixed-point loop failed to converge.
    #[error("outer loop did not converge after {iterations} iterations (last change {last_change})")]
    OuterNoConvergence { iterations: usize, last_change: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
