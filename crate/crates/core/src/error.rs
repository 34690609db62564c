use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("quadrature did not reach tolerance {tol:e} (estimated error {estimate:e})")]
    Quadrature { tol: f64, estimate: f64 },

    #[error("empty measure")]
    EmptyMeasure,

    #[error("noise mode {index} out of range (K = {modes})")]
    ModeOutOfRange { index: usize, modes: usize },

    #[error("exact transport needs equal particle counts ({left} vs {right})")]
    UnequalSupport { left: usize, right: usize },

    #[error("sinkhorn did not converge after {iterations} iterations (marginal error {error:e})")]
    SinkhornDivergence { iterations: usize, error: f64 },

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("non-finite state at step {step} (particle {particle})")]
    BlowUp { step: usize, particle: usize },

    #[error("inner fixed point did not converge at step {step} (residual {residual:e})")]
    InnerSolve { step: usize, residual: f64 },

    #[error("picard iteration did not reach tol after {iterations} iterations (last ratio {last_ratio})")]
    PicardNotConverged { iterations: usize, last_ratio: f64 },

    #[error("window {window}: {source}")]
    Window { window: usize, source: Box<Error> },

    #[error("zero initial flow distance")]
    ZeroDistance,

    #[error("missing provenance: {0}")]
    MissingProvenance(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Quadrature { .. }
            | Error::SinkhornDivergence { .. }
            | Error::BlowUp { .. }
            | Error::InnerSolve { .. }
            | Error::PicardNotConverged { .. } => true,
            Error::Window { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
