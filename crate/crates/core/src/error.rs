use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step index {t} out of range 0..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("invalid world: {field}: {reason}")]
    InvalidWorld { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("identity embedding does not match any identity in the world")]
    UnknownIdentity,

    #[error("unknown attribute label {0}")]
    UnknownAttribute(u32),

    #[error("inversion requires a null identity condition")]
    IdentityNotNull,

    #[error("sigma is zero at interior step {0}")]
    ZeroInteriorSigma(usize),

    #[error("second-order estimate at interior step {0} needs the lookahead state")]
    MissingLookahead(usize),

    #[error("trajectory carries no recorded attribute condition")]
    MissingAttribute,

    #[error("trajectory is incompatible: {0}")]
    TrajectoryMismatch(String),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("length mismatch: {left} inputs vs {right} outputs")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),
}
