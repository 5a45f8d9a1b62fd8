use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the normalisation threshold")]
    ZeroVector { norm: f64 },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of size {0} is too small (need at least 2)")]
    EmptyBatch(usize),
    #[error("invalid positive index {positive} for anchor {anchor} in batch of {batch}")]
    InvalidPositiveIndex {
        anchor: usize,
        positive: usize,
        batch: usize,
    },
    #[error("anchor {0} has an empty positive set")]
    EmptyPositiveSet(usize),
    #[error("embedding soft labels requested without embeddings")]
    MissingEmbeddings,
    #[error("backward called without a cached forward pass")]
    MissingForwardCache,
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("location `{0}` has no visits")]
    NoVisits(String),
    #[error("cannot fill {splits} splits from {locations} locations")]
    InsufficientLocations { splits: usize, locations: usize },
    #[error("crop {crop_h}x{crop_w} exceeds raster {height}x{width}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        height: usize,
        width: usize,
    },
    #[error("species index {species} out of range for {count} species")]
    SpeciesOutOfRange { species: usize, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("k = {k} exceeds the {available} available entries")]
    KTooLarge { k: usize, available: usize },
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("{0} is empty")]
    EmptyInput(String),
    #[error("location `{0}` missing from {1}")]
    MissingLocation(String, String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
