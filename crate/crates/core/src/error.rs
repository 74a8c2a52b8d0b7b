use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate base label `{0}`")]
    DuplicateLabel(String),
    #[error("component count must be at least 1, got {0}")]
    InvalidComponentCount(usize),
    #[error("time grid needs at least 3 points, got {0}")]
    GridTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("level {level} out of range (truncation level {max})")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("level-0 component must be 1, got {0}")]
    NormalizationError(f64),
    #[error("memory budget exceeded: {needed} entries requested, budget {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("interaction degree {0} is not supported (only the cubic family)")]
    UnsupportedDegree(u32),
    #[error("Green's function of K is not available")]
    MissingGreen,
    #[error("operator is not I plus a strictly raising part: {0}")]
    NotNilpotent(String),
    #[error("weights must sum to 1, got {0}")]
    WeightNotNormalized(f64),
    #[error("source vanishes at label {label} where the weight is nonzero")]
    DivisionByZeroSource { label: usize },
    #[error("interaction kernel M(z) vanishes at base label {label}")]
    SingularInteraction { label: usize },
    #[error("coupling λ is zero; the interaction operator has no right inverse")]
    ZeroCoupling,
    #[error("1 + O(z) = {value:e} vanishes at base label {label}")]
    ResonantDeformation { label: usize, value: f64 },
    #[error("closed equation is singular at level {level}: null-space dimension {nullity}")]
    SingularClosure { level: usize, nullity: usize },
    #[error("zero pivot while building the rational-form operator: {0}")]
    SingularRationalForm(String),
    #[error("perturbation series increments grew for 3 consecutive orders (stopped at order {order})")]
    SeriesDiverging {
        order: usize,
        partial: Box<crate::solver::SolveReport>,
    },
    #[error("trajectory of sample {sample} diverged")]
    TrajectoryDiverged { sample: usize },
    #[error("moment order {0} exceeds the pairing-enumeration budget (8)")]
    CombinatorialBudget(usize),
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("unsupported dynamics: {0}")]
    UnsupportedDynamics(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
