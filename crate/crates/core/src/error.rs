use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("non-finite value at position {0}")]
    NonFiniteValue(usize),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("subset {subset} has {got} captions, expected {expected}")]
    UnevenK {
        subset: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("batch must span at least two distinct subsets, got {0}")]
    BatchTooSmall(usize),

    #[error("caption has no tokens")]
    EmptyCaption,
    #[error("need at least {needed} points for k-means, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("label {label} out of range for {n} classes")]
    LabelOutOfRange { label: usize, n: usize },
    #[error("soft assignment row {row} sums to {sum}")]
    WeightsNotNormalized { row: usize, sum: f64 },
    #[error("loss part {0} is not finite")]
    NonFinitePart(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected a {expected} center bank")]
    WrongBank { expected: &'static str },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("margin window incomplete: {count} of {q} batches")]
    WindowIncomplete { count: u32, q: u32 },
    #[error("phase order violation: {0}")]
    PhaseOrderViolation(String),
    #[error("non-finite loss at phase {phase}, epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        phase: u8,
        epoch: usize,
        step: u64,
        detail: String,
    },

    #[error("query {0} has no ground-truth items")]
    EmptyGroundTruth(usize),

    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
