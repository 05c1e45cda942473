use thiserror::Error;

pub type Result<T> = std::result::Result<T, SingError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid rank: {0}")]
    InvalidRank(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numeric failure at iteration {iteration}: {message}")]
    Numeric { iteration: usize, message: String },

    #[error("restart {restart} failed: {source}")]
    Restart {
        restart: usize,
        #[source]
        source: Box<SingError>,
    },

    #[error("joint scores are anti-aligned in column {column}; flip signs before averaging")]
    Alignment { column: usize },

    #[error("too few subjects: {0}")]
    InsufficientSubjects(String),

    #[error("too few permutations: {n_perm} (at least {min} required)")]
    InsufficientPermutations { n_perm: usize, min: usize },

    #[error("missing rank for {dataset}: supply the rank explicitly or estimate it first with the JB screening heuristic")]
    MissingRank { dataset: &'static str },
}

impl SingError {
    /// True for failures of the numerical procedure itself, as opposed to
    /// rejected inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            SingError::Numeric { .. } => true,
            SingError::Restart { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
