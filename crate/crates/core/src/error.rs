use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("arms {0} and {1} share the maximal mean reward")]
    NonUniqueBestArm(usize, usize),
    #[error("arm index {index} out of range for {arms} arms")]
    ArmOutOfRange { index: usize, arms: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("arm set spans {rank} of {dim} dimensions")]
    RankDeficient { rank: usize, dim: usize },
    #[error("support of size {size} exceeds enumeration cap {cap}")]
    EnumerationTooLarge { size: usize, cap: usize },
    #[error("budget {budget} infeasible: {reason}")]
    InfeasibleBudget { budget: usize, reason: String },
    #[error("linear algebra failure: {0}")]
    Numerical(String),
    #[error("unknown instance family `{0}`")]
    UnknownFamily(String),
    #[error("cross-validation: {0}")]
    CrossValidation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
