use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("power iteration did not converge after {iterations} iterations (sigma {sigma}, residual {residual})")]
    NotConverged {
        iterations: usize,
        sigma: f64,
        residual: f64,
    },

    /// The top singular value is not simple, so the spectral norm is not
    /// differentiable at this point.
    #[error("degenerate top singular value: sigma1 = {sigma1}, sigma2 = {sigma2}")]
    DegenerateSpectrum { sigma1: f64, sigma2: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {0} has no samples")]
    MissingClass(usize),

    #[error("layer {0} has zero spectral norm")]
    ZeroNormLayer(usize),

    #[error("bound infeasible: m_min = {m_min} must exceed 8 * d_y = {limit}")]
    BoundInfeasible { m_min: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("sample count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl ToString,
    found: impl ToString,
) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
