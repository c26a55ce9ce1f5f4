use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid economy: {0}")]
    InvalidEconomy(String),

    #[error("invalid price: {0}")]
    InvalidPrice(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The utility maximizer leaves the open positive orthant.
    #[error("no interior maximum for agent {agent:?}: {detail}")]
    NoInteriorMaximum { agent: Option<usize>, detail: String },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular Jacobian at iterate")]
    SingularJacobian,

    #[error("finite-difference step collapsed to {step:e}")]
    StepUnderflow { step: f64 },

    #[error("0 is not a regular value: smallest singular value {sigma_min:e}")]
    RegularValueViolation { sigma_min: f64 },

    #[error("zero on the box boundary (min |f - y| = {min_norm:e})")]
    BoundaryZero { min_norm: f64 },

    #[error("target could not be made regular after {attempts} perturbations")]
    Irregular { attempts: usize },

    #[error("zero is not isolated: {count} zeros found in the ball")]
    NotIsolated { count: usize },

    #[error("determinant vanishes at the parameter range endpoint t = {t}")]
    DegenerateEndpoints { t: f64 },

    #[error("family does not vanish on the trivial branch (|h(t,0)| = {value:e} at t = {t})")]
    TrivialBranchViolated { t: f64, value: f64 },

    #[error("economy is critical: fiber point {price:?} has a rank-deficient Jacobian")]
    CriticalEconomy { price: Vec<f64> },

    #[error("continuation broke down; reached parameter range [{reached_lo}, {reached_hi}]")]
    ContinuationBreakdown { reached_lo: f64, reached_hi: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("bifurcation hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("continuation step collapsed below {step:e} at t = {t} without a singularity")]
    StepCollapse { t: f64, step: f64 },

    #[error("equilibrium is not certified as an unavoidable crisis")]
    CertificationMissing,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed user input rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidEconomy(_)
                | Error::InvalidPrice(_)
                | Error::InvalidInput(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
