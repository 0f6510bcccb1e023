use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("byte length {0} is not a multiple of the 5-byte record size")]
    TruncatedRecord(usize),
    #[error("event at ({x}, {y}) lies outside a {width}x{height} sensor")]
    CoordOutOfRange {
        x: u32,
        y: u32,
        width: u16,
        height: u16,
    },
    #[error("timestamp {0} us does not fit in 23 bits")]
    TimestampOverflow(f64),
    #[error("stream has no events")]
    EmptyStream,
    #[error("expected {expected} timestamps, stream is {actual}")]
    TimeState {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("{0} events collide at one location; spacing {1} does not fit in (0, 1]")]
    ResolutionInfeasible(usize, f64),
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("kernel has no learnable parameters")]
    NotLearnable,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("tensor is already projected")]
    AlreadyProjected,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation cache was produced by an older model version")]
    StaleCache,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no null-event candidates: every (x, y, p) location already holds an event")]
    NoCandidates,
    #[error("no sample is classified correctly on clean input")]
    EmptyPool,
    #[error("attack violated its projection contract: {0}")]
    ContractViolation(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
