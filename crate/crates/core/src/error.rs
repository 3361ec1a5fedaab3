use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("t = {t} outside [0,T) with T = {horizon}")]
    OutsideDomain { t: f64, horizon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tree depth {n} exceeds cap {cap}")]
    TreeTooDeep { n: usize, cap: usize },

    #[error("too few paths for regression: {paths} < {required}")]
    TooFewPaths { paths: usize, required: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("numerical failure in {module} at (k={k}, l={l}): {source}")]
    AtCell {
        module: &'static str,
        k: usize,
        l: usize,
        source: Box<Error>,
    },

    #[error("unknown catalog instance `{0}`")]
    UnknownInstance(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at(self, module: &'static str, k: usize, l: usize) -> Self {
        match self {
            e @ Error::AtCell { .. } => e,
            e => Error::AtCell {
                module,
                k,
                l,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
