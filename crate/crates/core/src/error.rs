use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed TNSR bytes.
    #[error("format error: {0}")]
    Format(String),

    /// Values that violate a type invariant (non-finite entries, bad lengths).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    /// Input collapses to zero norm after centering.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Antipodal pre-shapes; the great circle through them is not unique.
    #[error("degenerate geodesic at step {index}: points are antipodal")]
    DegenerateGeodesic { index: usize },

    #[error("degenerate direction ({what}) at index {index}: zero magnitude")]
    DegenerateDirection { what: &'static str, index: usize },

    /// A feature vector with zero norm where a cosine is required.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag, used in JSON error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::DegenerateGeodesic { .. } => "degenerate_geodesic",
            Error::DegenerateDirection { .. } => "degenerate_direction",
            Error::DegenerateFeature(_) => "degenerate_feature",
        }
    }
}
