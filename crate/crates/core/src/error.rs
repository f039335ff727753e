use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("weights are not on the probability simplex (sum = {sum}, min = {min})")]
    NotOnSimplex { sum: f64, min: f64 },

    #[error("data is not linearly separable")]
    NonSeparable,

    #[error("block mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("dataset has no label-flipped points")]
    NoFlippedPoints,

    #[error("operation requires axis-aligned feature blocks but the dataset is projected")]
    ProjectedDataset,

    #[error("training diverged at step {step}: objective = {value} (learning rate too large?)")]
    Diverged { step: usize, value: f64 },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("at {context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps the error with the experiment grid point (or other location) it came from.
    pub fn at(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } | Error::Linalg(_) | Error::NonSeparable => true,
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
