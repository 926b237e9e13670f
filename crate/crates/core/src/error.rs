use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },

    #[error("perturbation axis {0} outside 1..=6")]
    InvalidAxis(usize),

    #[error("action label {label} outside 0..={max}")]
    InvalidAction { label: usize, max: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid lookup table: {0}")]
    InvalidTable(String),

    #[error("invalid quantized layer: {0}")]
    InvalidLayer(String),

    #[error("singular Jacobian: {block} block has normalized determinant {ratio:e}")]
    SingularJacobian { block: &'static str, ratio: f64 },

    #[error("feature vector has a non-finite entry at index {index} ({stage})")]
    NonFiniteFeature { stage: &'static str, index: usize },

    #[error("not enough base points: need {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },

    #[error("invalid pair specification: {0}")]
    InvalidPairSpec(String),

    #[error("no feasible design point under the resource budget")]
    NoFeasibleDesign,

    #[error("invalid design-space configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("malformed point cloud file at line {line}: {reason}")]
    CloudFormat { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
