use thiserror::Error;

/// Crate-wide error type.  Variants are grouped by the failure class they
/// report: configuration, precondition violations detected before work
/// starts, and numerical failures detected during work.
#[derive(Error, Debug)]
pub enum BklError {
    #[error("scalar context mismatch: operands were built from different contexts")]
    CtxMismatch,

    #[error("scalar backend mismatch: {0}")]
    BackendMismatch(String),

    #[error("division not representable: {0}")]
    Division(String),

    #[error("matrix or frame not invertible over the coefficient ring: {0}")]
    NotInvertible(String),

    #[error("isotropy detected: exponents {0} and {1} coincide, affine gauging needs p_{0} != p_{1}")]
    Isotropic(usize, usize),

    #[error("ansatz too small: residual meets basis direction {0} outside the ansatz span")]
    AnsatzTooSmall(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BklError>;

impl BklError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            BklError::InvalidConfig(_) | BklError::Json(_) => 2,
            BklError::Precondition(_)
            | BklError::CtxMismatch
            | BklError::BackendMismatch(_)
            | BklError::Isotropic(..)
            | BklError::AnsatzTooSmall(_) => 3,
            _ => 4,
        }
    }
}
