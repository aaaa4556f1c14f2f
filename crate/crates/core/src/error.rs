use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input in {0}")]
    NonFiniteInput(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("contamination fraction {0} outside [0, 1/3)")]
    BadEpsilon(f64),
    #[error("every raw weight is zero")]
    AllZero,
    #[error("capped simplex is empty: n * cap = {0} < 1")]
    Infeasible(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("index {index} out of range for {len} observations")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("step size out of range: eta * nu = {0} must lie in (0, 1/2]")]
    StepSizeOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("lambda_star must be positive, got {0}")]
    NonpositiveLambda(f64),
    #[error("non-finite value while probing the moment map")]
    NonFiniteProbe,
    #[error("non-finite objective")]
    NonFiniteObjective,
    #[error("component count mismatch: estimate has {est}, truth has {truth}")]
    KMismatch { est: usize, truth: usize },
    #[error("invalid mixture parameters: {0}")]
    InvalidParams(String),
}
