use thiserror::Error;

/// Errors raised by polynomial algebra, simulation and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("degree degeneracy: leading coefficient {coeff:e} is below tolerance")]
    DegreeDegenerate { coeff: f64 },

    #[error(
        "numerator and denominator are not coprime (stability and coprimeness assumption violated)"
    )]
    NotCoprime,

    #[error("unstable model: {0} (stability and coprimeness assumption violated)")]
    Unstable(String),

    #[error("improper transfer function: numerator degree {num} exceeds denominator degree {den}")]
    Improper { num: usize, den: usize },

    #[error(
        "normal matrix is numerically singular (condition {condition:e} > limit {limit:e}); \
         the non-singularity assumption requires it to be generically non-singular with respect to the denominators"
    )]
    Singular { condition: f64, limit: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("outer iteration {outer}, submodel {submodel}: {source}")]
    AtCoordinate {
        outer: usize,
        submodel: usize,
        #[source]
        source: Box<IdentError>,
    },

    #[error("i/o: {0}")]
    Io(String),
}

impl IdentError {
    /// Strips coordinate context, returning the innermost error.
    pub fn root(&self) -> &IdentError {
        match self {
            IdentError::AtCoordinate { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for IdentError {
    fn from(e: std::io::Error) -> Self {
        IdentError::Io(e.to_string())
    }
}

impl From<csv::Error> for IdentError {
    fn from(e: csv::Error) -> Self {
        IdentError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, IdentError>;
