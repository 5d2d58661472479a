use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer state was not created for these parameters")]
    UninitializedState,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate variance at variable {index}: {value:e}")]
    DegenerateVariance { index: usize, value: f64 },
    #[error("matrix has zero Frobenius norm")]
    ZeroMatrix,
    #[error("zero-length vector cannot be normalized")]
    ZeroVector,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("Jacobi iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("target covariance is singular (eigenvalue {0:e})")]
    SingularTarget(f64),
    #[error("batch too small: need {needed} hidden states per side, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("series too short: length {len} < required {required}")]
    SeriesTooShort { len: usize, required: usize },
    #[error("window length {window} exceeds series length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("loss part `{0}` is not finite")]
    NonFinitePart(&'static str),
    #[error("domains share no labels")]
    NoSharedLabels,
    #[error("correlation template {0} is not positive semidefinite")]
    NonPsdTemplate(usize),
    #[error("expected {len} adapters (one per block), got {got}")]
    AdapterCountMismatch { len: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("header dimensions overflow: {0}")]
    ShapeOverflow(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    TypeError { key: String, reason: String },
    #[error("duplicate config key `{0}`")]
    DuplicateKey(String),
    #[error("config parse error at line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            UnknownKey(_) | TypeError { .. } | DuplicateKey(_) | ConfigSyntax { .. } | ConfigInvalid(_) => {
                ErrorKind::Usage
            }
            BadMagic { .. }
            | TruncatedFile(_)
            | ShapeOverflow(_)
            | Io(_)
            | Json(_)
            | EmptyDataset
            | EmptyInput(_)
            | LabelOutOfRange { .. }
            | SeriesTooShort { .. }
            | WindowTooLong { .. }
            | NoSharedLabels
            | CheckpointMismatch(_)
            | TooFewSamples { .. }
            | ShapeMismatch(_)
            | AdapterCountMismatch { .. }
            | BatchTooSmall { .. } => ErrorKind::Data,
            _ => ErrorKind::Numeric,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
