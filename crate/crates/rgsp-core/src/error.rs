use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum RgspError {
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shift operator is not numerically diagonalizable: {0}")]
    NonDiagonalizable(String),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("reference is identically zero")]
    ZeroReference,
    #[error("infeasible perturbation: {0}")]
    InfeasiblePerturbation(String),
    #[error("noise covariance is singular")]
    SingularNoiseCov,
    #[error("no feasible sample set: {0}")]
    InfeasibleStart(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("sampling node cannot see active frequency {0}")]
    FrequencyBlind(usize),
    #[error("iteration diverged: {0}")]
    Divergence(String),
    #[error("zero row {0} makes the normalization singular")]
    ZeroRow(usize),
    #[error("step size {eta} exceeds stability limit {limit}")]
    StepTooLarge { eta: f64, limit: f64 },
    #[error("dendrogram cannot be cut into {0} clusters")]
    InfeasibleCut(usize),
    #[error("infeasible constraint: {0}")]
    Infeasible(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("lapack routine {routine} failed with info={info}")]
    Lapack { routine: &'static str, info: i32 },
}

impl From<std::io::Error> for RgspError {
    fn from(e: std::io::Error) -> Self {
        RgspError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RgspError>;
