use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite level-set value {value} at ({x}, {y})")]
    NonFinite { x: f64, y: f64, value: f64 },
    #[error("point ({x}, {y}) lies outside the domain")]
    OutOfDomain { x: f64, y: f64 },
    #[error("node index {0} out of range")]
    InvalidNode(usize),
    #[error("coordinate ({x}, {y}) is not a vertex of the grid lattice")]
    OffLattice { x: f64, y: f64 },
    #[error("point ({x}, {y}) lies outside the cell")]
    OutsideCell { x: f64, y: f64 },
    #[error("field has {got} values but the grid has {expected} nodes")]
    FieldSize { expected: usize, got: usize },
    #[error("regridding did not converge after {0} sweeps")]
    RegridDiverged(usize),
    #[error("feature group `{0}` has zero variance")]
    ZeroVariance(&'static str),
    #[error("not enough samples: need at least {need}, got {got}")]
    NotEnoughSamples { need: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("empty dataset split `{0}`")]
    EmptySplit(&'static str),
    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model/grid mismatch: {0}")]
    ModelMismatch(String),
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
