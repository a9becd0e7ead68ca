use thiserror::Error;

/// Errors raised by the synthesis pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The functional produced a non-finite value. Carries the offending iterate.
    #[error("non-finite functional value at iterate {iterate:?} (iteration {iteration})")]
    NonFinite { iteration: usize, iterate: Vec<f64> },

    /// The adjoint output sits on a breakpoint over an interval of positive length.
    #[error("degenerate adjoint on channel {channel}: output stays on breakpoint {breakpoint} over [{start}, {end}]")]
    DegenerateAdjoint {
        channel: usize,
        breakpoint: f64,
        start: f64,
        end: f64,
    },

    /// A breakpoint was crossed twice inside one bracketing cell.
    #[error("grid too coarse: breakpoint {breakpoint} crossed twice inside [{start}, {end}]; refine the bracketing grid")]
    GridTooCoarse { breakpoint: f64, start: f64, end: f64 },

    #[error("level {level} is not a member of the admissible level set")]
    NotALevel { level: f64 },

    #[error("primal problem infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
