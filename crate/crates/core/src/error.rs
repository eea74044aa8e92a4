use thiserror::Error;

/// Errors produced by the fedproj library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid variance {value} at coordinate {index}; variances must be finite and > 0")]
    InvalidVariance { index: usize, value: f64 },

    #[error("non-finite value {value} in {what} at coordinate {index}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("divergence {0} has no closed-form projection")]
    UnsupportedDivergence(&'static str),

    #[error("invalid lambda {0}; lambda must be >= 0 or inf")]
    InvalidLambda(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("idx-bad-magic: expected {expected:#010x}, found {found:#010x}")]
    IdxBadMagic { expected: u32, found: u32 },

    #[error("idx-truncated: {0}")]
    IdxTruncated(String),

    #[error("idx-count-mismatch: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error(
        "dirichlet partition failed after {attempts} attempts to give every client >= {min_shard} \
         examples; use a larger beta or fewer clients"
    )]
    PartitionExhausted { attempts: usize, min_shard: usize },

    #[error("degenerate-sample: all paired differences are zero")]
    DegenerateSample,

    #[error("invalid binary posterior: {0}")]
    Codec(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_client(self, round: usize, client: usize) -> Self {
        Error::Client {
            round,
            client,
            source: Box::new(self),
        }
    }
}
