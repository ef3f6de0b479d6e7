//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("non-positive scale component {0}")]
    NonPositiveScale(f64),

    #[error("point is behind the camera")]
    BehindCamera,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask length {mask} does not match var count {var}")]
    MaskLengthMismatch { mask: usize, var: usize },

    #[error("corrupt state: {0}")]
    CorruptState(String),

    #[error("non-finite gradient in parameter group '{0}'")]
    NonFiniteGradient(String),

    #[error("non-finite loss at timestep {timestep}, stage {stage}")]
    NonFiniteLoss { timestep: u32, stage: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// Process exit code for the CLI: 2 for data problems, 3 for numerical
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Data(_) | CoreError::Io(_) | CoreError::CorruptState(_) => 2,
            CoreError::NonFiniteGradient(_) | CoreError::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}
