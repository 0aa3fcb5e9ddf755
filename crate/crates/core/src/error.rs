use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("newick syntax error at byte {pos}: {msg}")]
    NewickSyntax { pos: usize, msg: String },
    #[error("missing branch length above node `{0}`")]
    MissingBranchLength(String),
    #[error("node with {0} children; only bifurcating trees are supported")]
    Polytomy(usize),
    #[error("duplicate tip label `{0}`")]
    DuplicateTip(String),
    #[error("tree has {0} tips; at least 2 are required")]
    TooFewTips(usize),
    #[error("branch length {length} above node {node} is not positive")]
    NonPositiveBranchLength { node: usize, length: f64 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row}, column `{column}`: `{value}` is not a number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("duplicate taxon `{0}` in trait table")]
    DuplicateTaxon(String),
    #[error("trait table does not match tree tips; in tree only: {tree_only:?}; in table only: {table_only:?}")]
    Alignment { tree_only: Vec<String>, table_only: Vec<String> },
    #[error("trait `{column}`: {msg}")]
    Domain { column: String, msg: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix `{0}` is not symmetric positive definite")]
    NotPositiveDefinite(String),
    #[error("finite precision block is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("operation undefined for precisions carrying Infinite labels")]
    InfiniteLabel,
    #[error("post-order messages were computed for different parameters")]
    StaleMessages,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dense oracle limited to N*q <= {limit}, got {size}")]
    SizeGuard { size: usize, limit: usize },
    #[error("series of length {0} is too short (need at least 10)")]
    TooShortSeries(usize),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::IllConditioned(_)
                | Error::StaleMessages
                | Error::InfiniteLabel
                | Error::NotPositiveDefinite(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
