use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension too small for {k} directions: p = {p}")]
    DimensionTooSmall { k: usize, p: usize },

    #[error("degenerate cluster: weighted design is rank deficient")]
    DegenerateCluster,

    #[error("vertical hyperplane: response coefficient vanishes")]
    VerticalHyperplane,

    #[error("degenerate point set: {0}")]
    DegeneratePoints(String),

    #[error("proposal failed: {0}")]
    ProposalFailed(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, ClrError>;
