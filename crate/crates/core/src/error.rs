use thiserror::Error;

/// Errors produced by the estimation and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A cell with a single population unit has no alternative link, so the
    /// mislink probability is undefined; callers must force `lambda = 1`.
    #[error("degenerate cell: N_iq = {n_pop} < 2, no alternative link exists")]
    DegenerateCell { n_pop: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Second moment smaller than squared first moment.
    #[error("invalid moments: fbar2 = {fbar2} < fbar^2 = {fbar_sq}")]
    MomentError { fbar2: f64, fbar_sq: f64 },

    #[error("no audit sample for block {block}")]
    NoAudit { block: String },

    #[error("block {block} appears in the sample but carries no lambda paradata")]
    MissingLambda { block: String },

    #[error("area {area} has an empty sample")]
    EmptyArea { area: String },

    #[error("missing population aggregates for area {area}")]
    MissingAggregates { area: String },

    #[error("{what} did not converge after {iterations} iterations (residual norms {norms:?})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        norms: Vec<f64>,
    },

    #[error("singular matrix in {what}")]
    Singular { what: &'static str },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// More than the tolerated share of Monte Carlo replicates failed.
    #[error("{failures} of {replicates} replicates failed, above the {max_pct}% cap")]
    TooManyFailures {
        failures: usize,
        replicates: usize,
        max_pct: f64,
    },
}
