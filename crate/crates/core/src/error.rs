use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Validation failure naming every offending config key.
    #[error("invalid configuration keys [{}]: {message}", keys.join(","))]
    ConfigKeys { keys: Vec<String>, message: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("training fault at step {step}: {message}")]
    TrainingFault { step: u64, message: String },

    #[error("sampling fault at t={t}: {message}")]
    SamplingFault { t: usize, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unknown mode {given:?}; expected one of {expected}")]
    UnknownMode { given: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Lookup(_) => "lookup",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) | Error::ConfigKeys { .. } => "config",
            Error::Layout(_) => "layout",
            Error::Coverage(_) => "coverage",
            Error::Format(_) => "format",
            Error::Length { .. } => "length",
            Error::TrainingFault { .. } => "training_fault",
            Error::SamplingFault { .. } => "sampling_fault",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::UnknownMode { .. } => "unknown_mode",
            Error::Io(_) => "io",
        }
    }
}
