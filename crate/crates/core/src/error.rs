use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Atomic number outside the element vocabulary.
    #[error("unknown element: {0}")]
    UnknownElement(String),

    #[error("invalid crystal: {0}")]
    InvalidCrystal(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("probability vector rejected: {0}")]
    InvalidSimplex(String),

    /// Antipodal or otherwise undefined manifold operation.
    #[error("geometry: {0}")]
    Geometry(String),

    #[error("cannot shrink site {site} to order {order}: truncated weight {weight}")]
    ShrinkOrder { site: usize, order: usize, weight: f64 },

    #[error("atom count {n} exceeds model capacity {max}")]
    TooManyAtoms { n: usize, max: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("structure rejected: {0}")]
    Rejected(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Geometry(_))
    }
}
