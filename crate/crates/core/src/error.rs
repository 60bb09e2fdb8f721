use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("iteration computed zero tokens")]
    DegenerateIteration,

    #[error("commit window is empty")]
    EmptyWindow,

    #[error("commit window positions must be strictly increasing")]
    UnorderedWindow,

    #[error("target of {target} commits is infeasible for block size {block_size} (must lie in [1, {block_size}])")]
    InfeasibleTarget { block_size: u32, target: f64 },

    #[error("replay trace has no entry for request {request_id} step {step}")]
    TraceExhausted { request_id: u64, step: u64 },

    #[error("request {0} has already committed all of its output tokens")]
    RequestComplete(u64),

    #[error("position {position} committed for request {request_id} is not in the planned window")]
    IllegalCommit { request_id: u64, position: u32 },

    #[error("chunk size {0} is below the minimum of 2")]
    ChunkTooSmall(u32),

    #[error("scheduler policy has no chunk candidates")]
    NoCandidates,

    #[error("cost profile has {samples} samples; need at least 9 spanning 3 distinct token counts per segment")]
    InsufficientProfile { samples: usize },

    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),

    #[error("request {0} committed fewer than 2 tokens; TPOT is undefined")]
    SingleToken(u64),

    #[error("run produced no requests eligible for summary")]
    EmptyRun,

    #[error("P90 TPOT {p90:.4}s exceeds SLO {slo:.4}s even at the lowest rate {rate} req/s")]
    SloInfeasible { rate: f64, p90: f64, slo: f64 },

    #[error("simulation made no progress at clock {clock:.6}s: {detail}")]
    NonTerminating { clock: f64, detail: String },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Malformed config text; the message carries line and column.
    #[error("{0}")]
    Parse(String),

    #[error("{0}")]
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

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
