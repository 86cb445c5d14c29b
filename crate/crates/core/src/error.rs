use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("plane offset {0} too close to zero for a plane-induced homography")]
    ZeroOffset(f64),
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("layer chain broken at layer {layer}: {out_prev} outputs feed {in_next} inputs")]
    BrokenChain { layer: usize, out_prev: usize, in_next: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        NnError::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("score matrix shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("index ({0}, {1}) outside a {2}x{3} assignment")]
    IndexOutOfRange(usize, usize, usize, usize),
}

#[derive(Debug, Error)]
pub enum HypoError {
    #[error("at least one plane correspondence is required")]
    EmptyCorrespondences,
    #[error("{0} correspondences exceed the scoring capacity of {1}")]
    TooManyCorrespondences(usize, usize),
    #[error("decoded quaternion has norm {0:e}")]
    DegenerateQuaternion(f64),
    #[error("fusion strategy needs hypothesis scores")]
    MissingScores,
    #[error("fusion strategy needs hypothesis costs")]
    MissingCosts,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("scene file: {0}")]
    Format(String),
    #[error("unsupported scene file version {0}")]
    Version(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("degenerate point configuration for homography fitting")]
    DegenerateConfiguration,
    #[error("need at least 4 point pairs, got {0}")]
    NotEnoughPoints(usize),
    #[error("homography decomposition failed: {0}")]
    NumericalFailure(&'static str),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot summarize an empty error list")]
    EmptyInput,
    #[error("polygon area {0:e} is degenerate")]
    DegeneratePolygon(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
