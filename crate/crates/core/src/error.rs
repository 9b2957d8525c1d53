use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or intermediate quantity left the valid domain
    /// (non-finite value, covariance that is not positive definite).
    #[error("domain error{}: {reason}", subset_suffix(*.subset))]
    Domain {
        subset: Option<usize>,
        reason: String,
    },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The manager/worker message protocol was violated.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("worker for subset {subset} failed: {reason}")]
    WorkerFailed { subset: usize, reason: String },

    /// The M step produced a non-finite parameter. The trace up to the
    /// failing iteration is attached.
    #[error("diverged at iteration {iteration}")]
    Diverged {
        iteration: u64,
        trace: Box<crate::runtime::Trace>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn subset_suffix(subset: Option<usize>) -> String {
    match subset {
        Some(k) => format!(" in subset {k}"),
        None => String::new(),
    }
}

impl Error {
    pub fn domain(reason: impl Into<String>) -> Self {
        Error::Domain {
            subset: None,
            reason: reason.into(),
        }
    }

    /// Attach a subset id to a domain error that does not carry one yet.
    pub fn in_subset(self, subset: usize) -> Self {
        match self {
            Error::Domain { subset: None, reason } => Error::Domain {
                subset: Some(subset),
                reason,
            },
            other => other,
        }
    }
}
