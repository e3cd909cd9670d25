use thiserror::Error;

pub type Result<T> = std::result::Result<T, GediError>;

#[derive(Debug, Error)]
pub enum GediError {
    #[error("input contains non-finite values")]
    NonFiniteInput,

    #[error("need at least 2 observations, got {0}")]
    EmptyInput(usize),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("kernel matrix is rank deficient: rank {rank} < order {order}")]
    RankDeficientKernel { rank: usize, order: usize },

    #[error("variable has zero variance")]
    ZeroVariance,

    #[error("protected attribute has a single group")]
    SingleGroup,

    #[error("target has a single class")]
    SingleClass,

    #[error("quantile binning produced {0} non-empty bins (need at least 2)")]
    DegenerateBinning(usize),

    #[error("invalid configuration: {0}")]
    InvalidSpec(String),

    #[error("relative threshold must be resolved against reference targets first")]
    UnresolvedRelativeThreshold,

    #[error("constraint set is infeasible")]
    Infeasible,

    #[error("solver hit the iteration limit ({iterations}) with KKT residual {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },

    #[error("rounding repair failed: violation {violation:e} exceeds limit {limit:e}")]
    RepairFailed { violation: f64, limit: f64 },

    #[error("labels are degenerate (a single class)")]
    DegenerateLabels,

    #[error("feature schema mismatch: model expects {expected} columns, got {found}")]
    SchemaMismatch { expected: usize, found: usize },

    #[error("learner `{0}` is not differentiable")]
    NonDifferentiableLearner(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    ParseError {
        line: usize,
        column: String,
        message: String,
    },

    #[error("too few rows ({rows}) for {folds} folds")]
    TooFewRows { rows: usize, folds: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GediError {
    /// Stable machine-readable identifier used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            GediError::NonFiniteInput => "NonFiniteInput",
            GediError::EmptyInput(_) => "EmptyInput",
            GediError::LengthMismatch { .. } => "LengthMismatch",
            GediError::RankDeficientKernel { .. } => "RankDeficientKernel",
            GediError::ZeroVariance => "ZeroVariance",
            GediError::SingleGroup => "SingleGroup",
            GediError::SingleClass => "SingleClass",
            GediError::DegenerateBinning(_) => "DegenerateBinning",
            GediError::InvalidSpec(_) => "InvalidSpec",
            GediError::UnresolvedRelativeThreshold => "UnresolvedRelativeThreshold",
            GediError::Infeasible => "Infeasible",
            GediError::MaxIterations { .. } => "MaxIterations",
            GediError::RepairFailed { .. } => "RepairFailed",
            GediError::DegenerateLabels => "DegenerateLabels",
            GediError::SchemaMismatch { .. } => "SchemaMismatch",
            GediError::NonDifferentiableLearner(_) => "NonDifferentiableLearner",
            GediError::MissingColumn(_) => "MissingColumn",
            GediError::ParseError { .. } => "ParseError",
            GediError::TooFewRows { .. } => "TooFewRows",
            GediError::Io(_) => "Io",
            GediError::Csv(_) => "Csv",
            GediError::Json(_) => "Json",
        }
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GediError::NonFiniteInput)
    }
}

pub(crate) fn check_same_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(GediError::LengthMismatch { expected, found })
    }
}
