use thiserror::Error;

/// Errors raised anywhere in the integer inference engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate-range: min == max == {0}")]
    DegenerateRange(f64),
    #[error("zero-excluded: [{min}, {max}] does not contain 0")]
    ZeroExcluded { min: f64, max: f64 },
    #[error("invalid range [{min}, {max}]")]
    InvalidRange { min: f64, max: f64 },
    #[error("unsupported bitwidth {0} (expected 8, 16 or 32)")]
    UnsupportedBitwidth(u32),
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("multiplier-unrepresentable: {0}")]
    MultiplierUnrepresentable(f64),
    #[error("fx-overflow: {0}")]
    FixedPointOverflow(String),
    #[error("nonfinite-activation at x = {0}")]
    NonFiniteActivation(f64),
    #[error("invalid-budget: {0} pieces")]
    InvalidBudget(usize),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("uncalibrated-tensor: {0}")]
    Uncalibrated(String),
    #[error("concat-params-mismatch")]
    ConcatParamsMismatch,
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("value {value} out of range for {bitwidth}-bit storage")]
    OutOfStorage { value: i64, bitwidth: u32 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("checksum failure in `{0}`")]
    Checksum(String),
    #[error("dangling tensor reference `{0}`")]
    DanglingTensor(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
