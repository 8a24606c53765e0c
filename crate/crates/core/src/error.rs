use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of bounds: {0}")]
    InvalidIndex(String),

    #[error("distribution is not stochastic at {context}: row sums to {sum}")]
    NonStochastic { context: String, sum: f64 },

    #[error("negative probability at {context}: {value}")]
    NegativeProbability { context: String, value: f64 },

    #[error("product-space cap exceeded: {required} entries > cap {cap}")]
    CapExceeded { required: u128, cap: u128 },

    #[error("solver did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("homogeneity violated: {0}")]
    Homogeneity(String),

    #[error("dangling feature set {set:?}: present in the state-to-feature map but absent from the feature-to-action map")]
    DanglingFeature { set: String },

    #[error("validation failed at {path}: {message}")]
    Validation { path: String, message: String },

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("empty option set")]
    EmptyOptionSet,

    #[error("option {0} does not belong to this goal kernel")]
    ForeignOption(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
