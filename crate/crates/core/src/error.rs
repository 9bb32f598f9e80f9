use mixmodal_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("code index {index} out of range for codebook of {size}")]
    CodeOutOfRange { index: usize, size: usize },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("non-finite activations after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite sampler state at DDIM step {step}")]
    NonFiniteSample { step: usize },
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("step budget of {budget} exhausted inside an image")]
    BudgetExhausted { budget: usize },
    #[error("malformed image segment at position {position}: {reason}")]
    MalformedSegment { position: usize, reason: String },
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("invalid caption: {0}")]
    InvalidCaption(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Checksum => "checksum",
            Error::Version { .. } => "version",
            Error::MissingParam(_) => "missing-param",
            Error::TokenOutOfRange { .. } => "token-out-of-range",
            Error::CodeOutOfRange { .. } => "code-out-of-range",
            Error::EmptyCodebook => "empty-codebook",
            Error::InvalidTemperature(_) => "invalid-temperature",
            Error::SequenceTooLong { .. } => "sequence-too-long",
            Error::TimestepOutOfRange { .. } => "timestep-out-of-range",
            Error::Schedule(_) => "schedule",
            Error::NonFiniteActivation { .. } => "non-finite-activation",
            Error::NonFiniteSample { .. } => "non-finite-sample",
            Error::Divergence { .. } => "divergence",
            Error::BudgetExhausted { .. } => "budget-exhausted",
            Error::MalformedSegment { .. } => "malformed-segment",
            Error::UnknownWord(_) => "unknown-word",
            Error::InvalidCaption(_) => "invalid-caption",
        }
    }
}
