use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration blew up at t = {t}")]
    IntegrationBlowup { t: f64 },

    #[error("KKT system is singular: degenerate equality constraints")]
    DegenerateConstraints,

    #[error("objective is not finite at the starting point")]
    Diverged,

    #[error("funnel violated at t = {t}: |e1| = {e1}, |e2| = {e2}")]
    FunnelViolation { t: f64, e1: f64, e2: f64 },

    #[error("time went backwards: {previous} -> {t}")]
    TimeRegression { previous: f64, t: f64 },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("input data is not persistently exciting of order {order}")]
    NotPersistentlyExciting { order: usize },

    #[error("past window is inconsistent with the data (residual {residual:e})")]
    InconsistentHistory { residual: f64 },

    #[error("surrogate prediction blew up at step {step}")]
    SurrogateBlowup { step: usize },

    #[error("cluster {cluster}: input data has rank {rank} < {needed}")]
    RankDeficientInputs { cluster: usize, rank: usize, needed: usize },

    #[error("unsupported Wendland kernel (dimension {dim}, smoothness {smoothness})")]
    UnsupportedKernel { dim: usize, smoothness: usize },

    #[error(
        "kernel Gram matrix is ill-conditioned (condition {condition:e}); \
         use a larger support radius or fewer points"
    )]
    IllConditioned { condition: f64 },

    #[error("infeasible reference spline: {0}")]
    InfeasibleSpline(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
