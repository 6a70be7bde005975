use std::io;

use crate::model::ParamKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec at layer {layer} -> {next}: {reason}")]
    Spec { layer: usize, next: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("forward cache does not match parameters: {0}")]
    CacheMismatch(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("missing parameter {0}")]
    MissingParam(ParamKey),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(String),

    #[error("aggregation weights sum to zero")]
    ZeroWeight,

    #[error("no model for center {0}")]
    MissingModel(u32),

    #[error("adaptation data leaks from the evaluation split: {0}")]
    AdaptationLeak(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("declared dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("silo {silo}, round {round}, step {step}: {source}")]
    Training {
        silo: u32,
        round: u32,
        step: usize,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Spec { .. } => "spec",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::CacheMismatch(_) => "cache_mismatch",
            Error::KeyMismatch(_) => "key_mismatch",
            Error::MissingParam(_) => "missing_param",
            Error::InvalidConfig(_) => "config",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::UndefinedAuc(_) => "undefined_auc",
            Error::ZeroWeight => "zero_weight",
            Error::MissingModel(_) => "missing_model",
            Error::AdaptationLeak(_) => "adaptation_leak",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::DimensionOverflow(_) => "dimension_overflow",
            Error::Training { source, .. } => source.code(),
            Error::Io(_) => "io",
        }
    }
}
