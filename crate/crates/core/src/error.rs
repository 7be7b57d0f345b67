use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("empty pixel subset")]
    EmptySubset,
    #[error("pixel index {index} out of range for {n_pixels} pixels")]
    PixelOutOfRange { index: usize, n_pixels: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("no labeled pixels")]
    NoLabeledPixels,
    #[error("no positive bag")]
    NoPositiveBag,
    #[error("no negative bag")]
    NoNegativeBag,
    #[error("pixel {0} is not in any bag")]
    PixelNotInBag(usize),
    #[error("proportion row {row} violates the simplex by {amount:e}")]
    ProportionViolation { row: usize, amount: f64 },
    #[error("endmember column {column} is not unit norm (squared norm {sq_norm})")]
    NotUnitNorm { column: usize, sq_norm: f64 },
    #[error("could not separate endmembers by {min_angle_deg} degrees after {attempts} attempts; try more bands")]
    AngleSeparation { attempts: usize, min_angle_deg: f64 },
    #[error("zero rank variance")]
    ZeroRankVariance,
    #[error("degree of improvement undefined: e_true equals e_err")]
    UndefinedDoi,
    #[error("field `{0}` missing from record")]
    MissingField(&'static str),
    #[error("alpha {alpha} flips no labels out of {n_negative} negative pixels")]
    NothingFlipped { alpha: f64, n_negative: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
