use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum PaluError {
    #[error("shape mismatch: {op} got {left} and {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("SVD did not converge after {sweeps} sweeps")]
    NonConvergence { sweeps: usize },

    #[error("matrix is not positive definite at pivot {pivot} (value {value:e}); retry with a larger jitter")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible rank budget: {0}")]
    InfeasibleBudget(String),

    #[error("container format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("golden mismatch: {0}")]
    GoldenMismatch(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PaluError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PaluError> = std::result::Result<T, E>;

impl PaluError {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        PaluError::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PaluError::InvalidArgument(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        PaluError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &PaluError {
        match self {
            PaluError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 1 validation, 2 numerical failure, 3 golden mismatch.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            PaluError::NonConvergence { .. }
            | PaluError::NotPositiveDefinite { .. }
            | PaluError::NonFinite(_) => 2,
            PaluError::GoldenMismatch(_) => 3,
            _ => 1,
        }
    }
}
