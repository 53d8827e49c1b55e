use thiserror::Error;

/// Errors surfaced by model loading, simulation, and the solvers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config parse failure: {0}")]
    Parse(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("R not invertible")]
    SingularR,

    #[error("nonpositive intensity")]
    NonpositiveIntensity,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("step-size rejection: dt/epsilon = {ratio} exceeds stiffness bound {bound}")]
    StepSizeRejected { ratio: f64, bound: f64 },

    #[error("numerical overflow in {0}")]
    Overflow(String),

    #[error("singular regression: condition number {cond:.3e} exceeds 1e8")]
    SingularRegression { cond: f64 },

    #[error("jump tilt must stay positive: Gamma = {0} at a jump")]
    NonpositiveJumpTilt(f64),

    #[error("driver depends on (zeta, theta); time-average oracle undefined")]
    ZetaThetaDependent,

    #[error("non-dissipative model: empirical mu = {0}")]
    NonDissipative(f64),

    #[error("lambda cache refused: held-out interpolation error {err:.3e} above tolerance {tol:.3e}")]
    CacheNotCertified { err: f64, tol: f64 },

    #[error("conjugate infimum attained only on the (z, u) box boundary; widen the box")]
    ConjugateBoxTooSmall,

    #[error("lambda map evaluation failure: {0}")]
    LambdaEval(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
