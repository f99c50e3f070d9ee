use thiserror::Error;

/// Errors surfaced by the diffusion-regression library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("embedding dimension {0} must be even")]
    OddDimension(usize),
    #[error("dimension mismatch: {what} expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite parameter update")]
    NonFiniteUpdate,
    #[error("training diverged at step {step} (loss {loss})")]
    DivergedTraining { step: usize, loss: f64 },
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("empty sample")]
    EmptySample,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate mixture: {0}")]
    DegenerateMixture(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyDataset => "EmptyDataset",
            Error::DegenerateVariance(_) => "DegenerateVariance",
            Error::InvalidRange(_) => "InvalidRange",
            Error::StepOutOfRange { .. } => "StepOutOfRange",
            Error::OddDimension(_) => "OddDimension",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFiniteActivation(_) => "NonFiniteActivation",
            Error::NonFiniteGradient => "NonFiniteGradient",
            Error::NonFiniteUpdate => "NonFiniteUpdate",
            Error::DivergedTraining { .. } => "DivergedTraining",
            Error::EmptyEnsemble => "EmptyEnsemble",
            Error::EmptySample => "EmptySample",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::DegenerateMixture(_) => "DegenerateMixture",
            Error::UnknownTask(_) => "UnknownTask",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::CheckpointCorrupt(_) => "CheckpointCorrupt",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
