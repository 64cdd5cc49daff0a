use thiserror::Error;

/// Errors surfaced by the library. Variant names follow the failure
/// they describe; the CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("NonFiniteLogits: logit vector contains a non-finite value")]
    NonFiniteLogits,
    #[error("ClassOutOfRange: label {label} >= class count {m}")]
    ClassOutOfRange { label: u16, m: usize },
    #[error("InvalidSimplex: probability row {index} violates the simplex invariant")]
    InvalidSimplex { index: usize },
    #[error("BudgetExceedsMask: class {class} budget {budget} exceeds mask size {mask}")]
    BudgetExceedsMask {
        class: u16,
        budget: usize,
        mask: usize,
    },
    #[error("InconsistentScribble: scribble label disagrees with ground truth at pixel {index}")]
    InconsistentScribble { index: usize },
    #[error("ClassUnobserved: class {class} has no labeled pixels")]
    ClassUnobserved { class: usize },
    #[error("DegeneratePosterior: adapted posterior denominator vanished at row {index}")]
    DegeneratePosterior { index: usize },
    #[error("GridMismatch: grid {grid} does not divide {height}x{width}")]
    GridMismatch {
        grid: usize,
        height: usize,
        width: usize,
    },
    #[error("BadCostMatrix: cost matrix must be square and finite")]
    BadCostMatrix,
    #[error("ShapeMismatch: operand dimensions disagree")]
    ShapeMismatch,
    #[error("OcclusionTooLarge: side {side} exceeds image extent {limit}")]
    OcclusionTooLarge { side: usize, limit: usize },
    #[error("NoSupervision: no labeled pixel available for the partial cross entropy loss")]
    NoSupervision,
    #[error("DegenerateConsistency: zero-norm operand in the global consistency loss")]
    DegenerateConsistency,
    #[error("FeatureDimMismatch: model expects {expected} features, got {got}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("TrainingDiverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;
