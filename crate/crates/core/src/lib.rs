//! Privacy-preserving text obfuscation for cloud LLM inference.
//!
//! Private text is split into atomic units (entity titles, feature values,
//! clauses), each unit is rewritten by an obfuscation model into a
//! non-natural-language form, and the rewrites are constrained so that
//! adjacent texts keep their relative similarity and cannot be told apart
//! beyond an `e^epsilon` likelihood ratio.
//!
//! The modules follow the data flow:
//!
//! * [`text`]: tokens, edit distance, adjacency graph
//! * [`scorer`]: symmetric similarity scorers
//! * [`providers`]: chat and embedding backends, including the mock codebook
//! * [`engine`]: candidate generation and the semantic constraint pass
//! * [`ldp`]: clique decomposition and post-sampling
//! * [`reusable`]: entity stores, user payloads, tabular features
//! * [`nonreusable`]: clause-level obfuscation of free text
//! * [`metrics`]: inference prompts, task and overlap metrics
//! * [`attack`]: recovery attacks and the distribution-matching attack
//! * [`optimizer`]: APE and OPRO style prompt search

pub mod attack;
pub mod engine;
pub mod ldp;
pub mod metrics;
pub mod nonreusable;
pub mod optimizer;
pub mod providers;
pub mod reusable;
pub mod scorer;
pub mod text;

pub use providers::ProviderError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate unit id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("expected an embedding of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned an empty completion {attempts} times")]
    EmptyCompletion { attempts: u32 },
    #[error("unknown entity ids: {}", .0.join(", "))]
    UnknownEntities(Vec<String>),
    #[error("non-numeric value {0:?}")]
    NonNumeric(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dataset of {size} entries is too small to sample {needed} others")]
    DatasetTooSmall { size: usize, needed: usize },
    #[error("output does not match any allowed label: {raw:?}")]
    UnparseableOutput { raw: String },
    #[error("could not obtain {needed} distinct seed prompts after {requests} requests")]
    IndistinctSeeds { needed: usize, requests: usize },
    #[error("scorer failure: {0}")]
    Scorer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
