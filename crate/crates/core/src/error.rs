use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("set is empty")]
    EmptySet,

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("(A, B) is not stabilizable: Riccati iteration stopped converging")]
    NotStabilizable,

    #[error("matrix is not Schur stable (spectral radius estimate {0})")]
    NotSchur(f64),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("no (N_s, r) pair satisfies the sampling bounds for eps in [{eps_l}, {eps_u}], beta = {beta} below {cap} samples")]
    NoFeasiblePair {
        eps_l: f64,
        eps_u: f64,
        beta: f64,
        cap: u64,
    },

    #[error("convolution grid too coarse: total mass {mass}")]
    GridTooCoarse { mass: f64 },

    #[error("tightened constraint set is empty at {0}")]
    InfeasibleTightening(String),

    #[error("terminal set is empty")]
    EmptyTerminalSet,

    #[error("{what} did not converge within {cap} iterations")]
    NonConvergence { what: &'static str, cap: usize },

    #[error("set pipeline produced an empty set at stage {0}")]
    EmptyStage(String),

    #[error("no s <= {0} gives a contractive mRPI bound")]
    NonContractive(usize),

    #[error("terminal constraint Z_f is not contained in Z_T")]
    TerminalNotNested,

    #[error("exact region computation needs a 2-D state, got {0}")]
    DimensionUnsupported(usize),

    #[error("QP infeasible")]
    Infeasible,

    #[error("initial state is outside the feasible region")]
    OutsideRegion,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
