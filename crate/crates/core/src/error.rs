use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input at element {index}")]
    NonFinite { index: usize },

    #[error("invalid quantization parameters: scale={scale}, zero_point={zero_point}")]
    InvalidQuantParams { scale: f32, zero_point: i32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("out of memory in `{tag}`: requested {requested} bytes with {live} live, budget {budget}")]
    OutOfMemory {
        tag: String,
        requested: usize,
        live: usize,
        budget: usize,
    },

    #[error("zero-byte allocation requested for `{0}`")]
    ZeroSizedAlloc(String),

    #[error("region #{0} released twice or never allocated by this arena")]
    DoubleRelease(u64),

    #[error("infeasible budget: at least {min_required} bytes needed, budget is {budget}")]
    InfeasibleBudget { min_required: usize, budget: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("tile size {t} invalid for sequence length {s}")]
    InvalidTile { t: usize, s: usize },

    #[error("sequence length {s} invalid (max {s_max})")]
    InvalidSequence { s: usize, s_max: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected \"MCUB\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("truncated section `{name}`")]
    TruncatedSection { name: String },

    #[error("model invariant violated: {0}")]
    InvariantViolation(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for the errors that model an MCU running out of SRAM.
    pub fn is_oom(&self) -> bool {
        matches!(self, Error::OutOfMemory { .. } | Error::InfeasibleBudget { .. })
    }
}
