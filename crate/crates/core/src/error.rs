use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid composition: {0}")]
    InvalidComposition(String),

    #[error("exact enumeration budget exceeded: N + n = {total} > {cap}")]
    SizeCap { total: u64, cap: u64 },

    #[error("integer overflow in exact arithmetic")]
    Overflow,

    #[error("color index {index} out of range for {colors} colors")]
    ColorIndex { index: usize, colors: usize },

    #[error("step index {index} out of range for {len} uniforms")]
    StepIndex { index: usize, len: usize },

    #[error("uniform draw on the excluded boundary u = 0")]
    BoundaryUniform,

    #[error("point is outside the open simplex corner")]
    OutsideSimplex,

    #[error("E[1/V_j] diverges: alpha_{index} = 1")]
    InfiniteMoment { index: usize },

    #[error("covariance is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("normal mass of this set requires {0}")]
    UnsupportedSet(&'static str),

    #[error("n must be at least 1")]
    ZeroSteps,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("set family is empty")]
    EmptyFamily,

    #[error("alpha_{index} = {value} is below delta * N = {floor}")]
    DeltaViolated {
        index: usize,
        value: u64,
        floor: f64,
    },

    #[error("delta = {delta} must lie in (0, 1/(d+1)) = (0, {bound})")]
    DeltaRange { delta: f64, bound: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid regime: {0}")]
    InvalidRegime(String),
}
