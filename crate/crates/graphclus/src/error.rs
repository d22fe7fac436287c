use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("{op}: incompatible shapes {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A computation produced or was handed a NaN/Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A parameter or argument was outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dense adjacency matrix was expected to be symmetric but was not.
    #[error("adjacency matrix is not symmetric at ({row}, {col})")]
    AsymmetricAdjacency { row: usize, col: usize },

    /// De-overlapping requires proposals sorted by descending predicted IoU.
    #[error("proposals not sorted by descending IoU at index {index}")]
    UnsortedProposals { index: usize },

    /// A vertex was claimed by two clusters of a supposedly disjoint family.
    #[error("vertex {vertex} assigned to more than one cluster")]
    DuplicateAssignment { vertex: usize },

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not match its expected on-disk format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
