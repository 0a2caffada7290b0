use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero distance between {0} and {1}")]
    ZeroDistance(String, String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("node {0} is isolated (zero generalized degree)")]
    IsolatedNode(usize),

    #[error("graph is disconnected")]
    Disconnected,

    #[error("matrix is not symmetric: |m[{i}][{j}] - m[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("eigensolver did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("{n} nodes exceeds the exact enumeration limit of {limit}; use the lambda2 bounds instead")]
    TooLarge { n: usize, limit: usize },

    #[error("lambda2 is degenerate (lambda3 - lambda2 = {gap:e}); perturb the configuration")]
    DegenerateLambda2 { gap: f64 },

    #[error("node index {0} out of range")]
    NodeOutOfRange(usize),

    #[error("no subset separates any commodity")]
    NoSeparatingCut,

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("distributed computation diverged at iteration {iteration}: error grew for {streak} consecutive iterations")]
    Divergence { iteration: usize, streak: usize },

    #[error("segment {segment} of ABS {abs} has zero duration but nonzero displacement")]
    ZeroDurationSegment { abs: usize, segment: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("scenario schema error: {0}")]
    Schema(String),

    #[error("scenario key `{key}`: {msg}")]
    Validation { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Machine-readable form of an [`Error`], emitted by the CLI on failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorRecord {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub message: String,
}

impl Error {
    /// Parse, schema and validation failures: problems with the input rather than the run.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Parse(_) | Error::Schema(_) | Error::Validation { .. } | Error::Config(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroDistance(..) => "zero_distance",
            Error::Config(_) => "config",
            Error::IsolatedNode(_) => "isolated_node",
            Error::Disconnected => "disconnected",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::Dimension { .. } => "dimension",
            Error::NoConvergence(_) => "no_convergence",
            Error::TooLarge { .. } => "too_large",
            Error::DegenerateLambda2 { .. } => "degenerate_lambda2",
            Error::NodeOutOfRange(_) => "node_out_of_range",
            Error::NoSeparatingCut => "no_separating_cut",
            Error::RootFinding(_) => "root_finding",
            Error::Divergence { .. } => "divergence",
            Error::ZeroDurationSegment { .. } => "zero_duration_segment",
            Error::Invalid(_) => "invalid",
            Error::Parse(_) => "parse",
            Error::Schema(_) => "schema",
            Error::Validation { .. } => "validation",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let key = match self {
            Error::Validation { key, .. } => Some(key.clone()),
            _ => None,
        };
        ErrorRecord { kind: self.kind(), key, message: self.to_string() }
    }
}
