use thiserror::Error;

/// Errors surfaced by lattice operations, solvers and experiment drivers.
#[derive(Error, Debug)]
pub enum ShlError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty box")]
    EmptyBox,

    #[error("incompatible massless RHS: g must be mean-zero when T = infinity (|mean g| = {mean:e})")]
    IncompatibleMasslessRhs { mean: f64 },

    #[error("solver did not reach tol={tol:e} in {iterations} iterations (residual {residual:e})")]
    SolverStalled {
        tol: f64,
        iterations: usize,
        residual: f64,
        /// Best iterate so far, flattened site values.
        best: Vec<f64>,
    },

    #[error("fixed-point iteration diverged after {iterations} iterations (ratio {ratio})")]
    SolverDiverged { iterations: usize, ratio: f64 },

    #[error("ellipticity violated: a[{direction}] at site {site} is {value} outside [{lambda}, 1]")]
    EllipticityViolated {
        site: usize,
        direction: usize,
        value: f64,
        lambda: f64,
    },

    #[error("perturbation breaks ellipticity at eps={eps}")]
    PerturbationBreaksEllipticity { eps: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("all samples failed: {0}")]
    AllSamplesFailed(String),
}

pub type Result<T> = std::result::Result<T, ShlError>;
