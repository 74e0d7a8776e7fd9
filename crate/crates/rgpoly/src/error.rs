use thiserror::Error;

#[derive(Debug, Error)]
pub enum RgError {
    #[error("scale {j} out of range [0, {n}]")]
    ScaleOutOfRange { j: u32, n: u32 },

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("enumeration cap exceeded: region has {count} blocks, cap is {cap}")]
    EnumerationCap { count: usize, cap: usize },

    #[error("no coordinate patch: region wraps the torus on axis {axis}")]
    NoPatch { axis: usize },

    #[error("field degree overflow: term of degree {degree} exceeds cap {cap} in {context}")]
    DegreeOverflow {
        degree: usize,
        cap: usize,
        context: String,
    },

    #[error("singular matrix in {context} (rank deficiency {deficiency})")]
    SingularGram { context: String, deficiency: usize },

    #[error("localisation failure in {context}: {reason}")]
    Localisation { context: String, reason: String },

    #[error("projection residual {residual:.3e} exceeds tolerance {tol:.3e} in {context}")]
    ProjectionResidual {
        context: String,
        residual: f64,
        tol: f64,
    },

    #[error("map {map} failed: {reason}")]
    MapFailure { map: usize, reason: String },

    #[error("zero-sum constraint violated for block {block}: residual {residual:.3e}")]
    ZeroSumViolation { block: usize, residual: f64 },

    #[error("non-unit constant term in graded series inversion")]
    NonUnitConstant,

    #[error("quadrature did not converge: last two estimates differ by {diff:.3e}")]
    QuadratureDivergence { diff: f64 },

    #[error("flow failed at scale {j}: {reason}")]
    Flow { j: u32, reason: String },

    #[error("no sign change of the boundedness predicate on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("linear program failed: {0}")]
    LpFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, RgError>;
