//! Error taxonomy shared by the whole crate.
//!
//! Variants map onto the process exit codes used by the command-line tool:
//! input/format errors (2), capacity errors (3), numerical degeneracies (4)
//! and internal invariant violations (5).

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, ChmmError>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum ChmmError {
    /// Malformed or inconsistent input (files, matrices, options).
    #[error("input error: {0}")]
    Input(String),

    /// The requested joint state space exceeds the configured cap.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A hidden state lost all posterior mass during estimation.
    #[error("degenerate state {state}: {detail}")]
    DegenerateState { state: usize, detail: String },

    /// A recursion produced an impossible zero/non-finite quantity.
    #[error("numerical degeneracy: {0}")]
    Numerical(String),

    /// An internal invariant was violated; indicates a bug.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl ChmmError {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            ChmmError::Input(_) => 2,
            ChmmError::Capacity(_) => 3,
            ChmmError::DegenerateState { .. } | ChmmError::Numerical(_) => 4,
            ChmmError::Invariant(_) => 5,
        }
    }
}

impl From<std::io::Error> for ChmmError {
    fn from(e: std::io::Error) -> Self {
        ChmmError::Input(format!("io: {e}"))
    }
}
