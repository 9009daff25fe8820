//! Crate-wide error type. Structural problems (malformed documents, dangling
//! ids, shape mismatches) are errors; annotation rule breaches are *not* —
//! those are [`crate::taxonomy::Violation`] values returned on the `Ok` path.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),

    /// Structural defect in a document, with position information.
    #[error("{0}")]
    Format(String),

    #[error("{at}: unknown verb {name:?}")]
    UnknownVerb { name: String, at: String },

    #[error("{at}: unknown class {name:?}")]
    UnknownClass { name: String, at: String },

    #[error("{at}: id {id} does not resolve to an instance in the same image")]
    DanglingId { id: u64, at: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("anchor reference out of grid: {0}")]
    AnchorOutOfGrid(String),

    #[error("infeasible synthetic placement: {0}")]
    Infeasible(String),

    /// A precondition on an operation's arguments was violated.
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
