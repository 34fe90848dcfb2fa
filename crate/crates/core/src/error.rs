use thiserror::Error;


pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("state index {0} out of range 0..=7")]
    InvalidState(u8),

    #[error("error times must be sorted ascending and lie in [0, 1]")]
    UnsortedTimes,

    #[error("a point mass (zero errors) has no density")]
    PointMass,

    #[error("histogram for error signature {0:?} is missing")]
    MissingHistogram([u32; 3]),

    #[error("posterior underflowed to zero")]
    Underflow,

    #[error("wonham filter diverged: every state probability clamped to zero")]
    Divergence,

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("histogram cache: {0}")]
    Cache(String),

    #[error("softplus argument must be non-positive, got {0}")]
    PositiveSoftplus(f64),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Cache(e.to_string())
    }
}
