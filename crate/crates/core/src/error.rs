use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth {depth:.3e} in camera frame")]
    NonPositiveDepth { depth: f64 },
    #[error("zero-length vector")]
    ZeroVector,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("track {0} is not a node of the track graph")]
    UnknownTrack(usize),
    #[error("two-view initialization failed: {0}")]
    InitializationFailed(String),
    #[error("view {view}: only {found} auxiliary correspondences")]
    InsufficientAuxiliary { view: usize, found: usize },
    #[error("degenerate two-view geometry: {0}")]
    DegenerateGeometry(String),
    #[error("need at least {required} correspondences, got {found}")]
    TooFewCorrespondences { required: usize, found: usize },
    #[error("only {found} inliers, need {required}")]
    TooFewInliers { required: usize, found: usize },
    #[error("triangulation angle too small")]
    LowParallax,
    #[error("triangulated point behind a camera")]
    CheiralityViolation,
    #[error("reprojection residual {0:.3} px exceeds threshold")]
    HighResidual(f64),
    #[error("no cross-model camera pairs")]
    NoCrossPairs,
    #[error("singular linear system: {0}")]
    SingularSystem(String),
    #[error("reconstructions form {} disconnected groups", .0.len())]
    DisconnectedModels(Vec<Vec<usize>>),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("only {0} views shared with ground truth, need 3")]
    TooFewCommonViews(usize),
    #[error("{stage}: {cause}")]
    Stage { stage: &'static str, cause: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            cause: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
