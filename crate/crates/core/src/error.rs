use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("trajectory has {length} agent turns, exceeding horizon t_max = {t_max}")]
    LengthExceedsHorizon { length: usize, t_max: usize },

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("enumeration exceeded cap of {cap} trajectories")]
    EnumerationCapExceeded { cap: usize },

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("data distribution does not cover {} target pairs: {}", .uncovered.len(), .uncovered.join(", "))]
    CoverageViolation { uncovered: Vec<String> },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("policy undefined on prefix: {0}")]
    PolicyUndefined(String),

    #[error("degenerate normalizer: sum of zeta = {zeta_sum:e}, weighted reward sum = {weighted_reward_sum:e}")]
    DegenerateNormalizer {
        zeta_sum: f64,
        weighted_reward_sum: f64,
    },

    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGradient { step: u64, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("zero variance in {0}")]
    ZeroVariance(String),

    #[error("{failed} of {total} agents failed; first error: {first}")]
    SweepFailed {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, OpeError>;
