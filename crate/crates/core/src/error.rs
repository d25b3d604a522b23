use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("coefficient is not finite on triangle {element} at t = {time}")]
    NonFiniteCoefficient { element: usize, time: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("eigen-solver did not converge after {iterations} iterations (worst residual {residual:.3e})")]
    EigenNoConvergence { iterations: usize, residual: f64 },

    #[error("mesh does not resolve actuator edge {coordinate} on axis {axis}; rebuild the mesh with the actuator layout as refinement")]
    MeshNotAligned { axis: usize, coordinate: f64 },

    #[error("direct-sum condition violated: cross-Gram condition number {condition:.3e} exceeds {threshold:.1e}")]
    DirectSumViolation { condition: f64, threshold: f64 },

    #[error("constraint matrix is rank deficient")]
    RankDeficient,

    #[error("shape mismatch in layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("training trajectory {index} blew up at t = {time}")]
    TrainingBlowUp { index: usize, time: f64 },

    #[error("{0}")]
    Undefined(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {field}: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
