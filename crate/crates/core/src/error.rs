use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("{file}: row {row}: {message}")]
    MalformedRow {
        file: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{file}: row {row}: unknown domain id {domain}")]
    UnknownDomain {
        file: PathBuf,
        row: usize,
        domain: u32,
    },

    #[error("household {household} is inconsistent: {message}")]
    InconsistentHousehold { household: u64, message: String },

    #[error("no covariate row for domain {0}")]
    MissingCovariates(u32),

    #[error("domain {0} has no persons")]
    EmptyDomain(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("certainty inclusions (h_l * n' / N >= 1) for households {0:?}")]
    CertaintyInclusion(Vec<u64>),

    #[error("domain sample is empty")]
    EmptyDomainSample,

    #[error("joint inclusion probability is zero for units {0} and {1}")]
    ZeroJointProbability(usize, usize),

    #[error("need at least {required} usable domains, got {usable}")]
    InsufficientDomains { usable: usize, required: usize },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("weighted design is rank deficient; collinear columns {0:?}")]
    RankDeficient(Vec<usize>),

    #[error("moment solver did not converge after {iterations} iterations (last iterate {last})")]
    NoConvergence { iterations: usize, last: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bootstrap: {excluded} of {total} replicates failed")]
    BootstrapExclusions { excluded: usize, total: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
