use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: shapes, grids, malformed files.
    Input,
    /// A model hypothesis does not hold for the supplied coefficients.
    Hypothesis,
    /// An iterative solver or quadrature failed.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time grid invalid: horizon {horizon} is not an integral multiple of dt {dt}")]
    InvalidGrid { horizon: f64, dt: f64 },

    #[error("domain is empty: {0}")]
    EmptyDomain(String),

    #[error("face {0} is redundant")]
    RedundantFace(usize),

    #[error("point is not on the boundary of the domain")]
    NotOnBoundary,

    #[error("no weight on an active face")]
    EmptyActiveSet,

    #[error("point lies outside the domain (violation {violation:e})")]
    OutsideDomain { violation: f64 },

    #[error("projection did not converge after {iterations} sweeps")]
    ProjectionDiverged { iterations: usize },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("initial condition rejected: {0}")]
    InitialCondition(String),

    #[error("support size {size} exceeds exact solver cap {cap}; use the entropic solver")]
    SolverCap { size: usize, cap: usize },

    #[error("{solver} did not converge within {iterations} iterations")]
    NoConvergence { solver: &'static str, iterations: usize },

    #[error("adapted entropy estimate needs samples from the perturbed law")]
    MissingSamples,

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("Lipschitz constant {constant} violated by {violations} of {pairs} sample pairs")]
    Lipschitz {
        constant: f64,
        violations: usize,
        pairs: usize,
    },

    #[error("malformed bundle: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Hypothesis(_) | Error::InitialCondition(_) | Error::Lipschitz { .. } => {
                ErrorClass::Hypothesis
            }
            Error::ProjectionDiverged { .. }
            | Error::NoConvergence { .. }
            | Error::Quadrature(_) => ErrorClass::Numerical,
            _ => ErrorClass::Input,
        }
    }
}
