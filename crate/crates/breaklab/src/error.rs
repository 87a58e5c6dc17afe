use thiserror::Error;

/// Error type shared by the whole laboratory.
///
/// Variants are grouped by how the CLI reports them: configuration and
/// input problems exit with code 2, numeric failures (precision exhaustion,
/// budget overruns, rational rotation numbers where an irrational one is
/// required) exit with code 3, and failed experiment criteria exit with
/// code 4.
#[derive(Error, Debug)]
pub enum LabError {
    #[error("invalid map specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric precision failure: {0}")]
    Precision(String),

    #[error("orbit budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("rational rotation number: {0}")]
    RationalRotation(String),

    #[error("criterion failed: {0}")]
    CriterionFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    /// Process exit code for CLI reporting: 2 invalid input, 3 numeric
    /// failure, 4 criterion failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::InvalidSpec(_)
            | LabError::InvalidConfig(_)
            | LabError::Io(_)
            | LabError::Json(_)
            | LabError::Csv(_) => 2,
            LabError::Precision(_)
            | LabError::BudgetExceeded(_)
            | LabError::RationalRotation(_) => 3,
            LabError::CriterionFailed(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
