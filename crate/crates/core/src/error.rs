use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("input `{name}` has shape {found:?}, declared {declared:?}")]
    InputShape {
        name: String,
        declared: [usize; 2],
        found: [usize; 2],
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput([usize; 2]),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("source point outside the unit ball (norm {0})")]
    OutsideSupport(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation diverged (|x| = {value:e}) for theta {theta:?}")]
    Diverged { theta: Vec<f64>, value: f64 },

    #[error("non-finite score at ({row}, {col})")]
    NonFiniteScore { row: usize, col: usize },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("oracle not available for simulator `{0}`")]
    NoOracle(String),

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
