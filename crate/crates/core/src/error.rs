//! Crate-wide error type. Every failure mode surfaces as a single-line
//! diagnostic suitable for a CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("edge {edge} is already fixed to a single op")]
    AlreadySplit { edge: usize },

    #[error("region holds {size} architectures, above the caller limit {cap}")]
    EnumerationTooLarge { size: u128, cap: u128 },

    #[error("oracle region holds {size} architectures, above the oracle cap {cap}; raise the oracle cap to at least {size} to proceed")]
    OracleCapExceeded { size: u128, cap: u128 },

    #[error("architectures or regions belong to different search spaces")]
    SpaceMismatch,

    #[error("bad architecture string at edge {edge}: {detail}")]
    ArchParse { edge: usize, detail: String },

    #[error("architecture string has {got} edges, space has {expected}")]
    ArchLength { expected: usize, got: usize },

    #[error("tensor {name} missing from weight store")]
    MissingTensor { name: String },

    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("architecture {encoding} lies outside the region")]
    OutOfRegion { encoding: String },

    #[error("region mismatch: {0}")]
    RegionMismatch(String),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("kendall tau undefined: all values tied on one side")]
    UndefinedTau,

    #[error("score vectors have different lengths ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },

    #[error("need at least {min} scored items, got {len}")]
    InsufficientData { len: usize, min: usize },

    #[error("no oracle entry for architecture {encoding}")]
    MissingTruth { encoding: String },

    #[error("level {level} out of range for a tree of depth {depth}")]
    InvalidLevel { level: usize, depth: usize },

    #[error("supernet {index} is untrained or lacks mixture parameters")]
    UntrainedSupernet { index: usize },

    #[error("only {have} distinct candidates, need {need}")]
    InsufficientCandidates { have: usize, need: usize },

    #[error("invalid search config: {0}")]
    InvalidSearchConfig(String),
}
