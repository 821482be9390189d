use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("head {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    HeadOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite gradient at attack step {step}")]
    NonFiniteGradient { step: usize },

    #[error("tamper mask is empty")]
    EmptyMask,

    #[error("degenerate calibration: largest training indicator is {0}, threshold must be positive")]
    DegenerateCalibration(f64),

    #[error("reference depth unavailable for frame {0}")]
    MissingReference(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
