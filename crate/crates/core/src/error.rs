use alloc::string::String;

/// Errors raised by the personalization core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown adapter target layer `{0}`")]
    UnknownLayer(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("extractor `{name}` failed: {message}")]
    Extractor { name: String, message: String },

    #[error("extractor `{name}` is not available: {hint}")]
    ExtractorUnavailable { name: String, hint: String },

    #[error("extractor `{0}` is already registered")]
    DuplicateExtractor(String),

    #[error("no extractor registered under `{0}`")]
    UnknownExtractor(String),

    #[error("backbone `{backbone}` is not available: {hint}")]
    BackboneUnavailable { backbone: String, hint: String },

    #[error("backbone `{backbone}` does not support {capability}")]
    Capability { backbone: String, capability: String },

    #[error("step {step}: backbone failure: {message}")]
    Backbone { step: usize, message: String },

    #[error(
        "truncation depth {requested} needs ~{needed_bytes} bytes, over the {budget_bytes} byte budget; \
         try truncation depth {suggested}"
    )]
    Sizing { requested: usize, suggested: usize, needed_bytes: usize, budget_bytes: usize },

    #[error("step {step}: non-finite {what}")]
    NonFinite { step: usize, what: String },

    #[error("no class label: pass a class hint or configure a zero-shot classifier")]
    NeedsClassHint,

    #[error("no `{label}` detection at or above confidence {threshold}")]
    NotFound { label: String, threshold: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("frame sink failed: {0}")]
    Sink(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
