//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

/// Unified error for every subsystem.
#[derive(Debug, Error)]
pub enum MdamError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("sequence mismatch at step {index}: {detail}")]
    SequenceMismatch { index: usize, detail: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing decoder for device '{0}'")]
    MissingDecoder(String),

    #[error("transfer incompatibility: {0}")]
    TransferIncompatible(String),

    #[error("training diverged at epoch {epoch} ({phase}): loss = {loss}")]
    Diverged {
        epoch: usize,
        phase: String,
        loss: f64,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("missing group '{0}' in checkpoint")]
    MissingGroup(String),

    #[error("empty pool: {0}")]
    EmptyPool(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MdamError>;

impl MdamError {
    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            MdamError::Config(_) | MdamError::SchemaVersion { .. } => 2,
            MdamError::NonFinite(_) | MdamError::Diverged { .. } | MdamError::Tape(_) => 4,
            _ => 3,
        }
    }

    /// Short machine-readable kind tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            MdamError::InvalidTopology(_) => "invalid_topology",
            MdamError::SequenceMismatch { .. } => "sequence_mismatch",
            MdamError::ShapeMismatch { .. } => "shape_mismatch",
            MdamError::Tape(_) => "tape",
            MdamError::NonFinite(_) => "non_finite",
            MdamError::Config(_) => "config",
            MdamError::MissingDecoder(_) => "missing_decoder",
            MdamError::TransferIncompatible(_) => "transfer_incompatible",
            MdamError::Diverged { .. } => "diverged",
            MdamError::SchemaVersion { .. } => "schema_version",
            MdamError::CorruptFile(_) => "corrupt_file",
            MdamError::MissingGroup(_) => "missing_group",
            MdamError::EmptyPool(_) => "empty_pool",
            MdamError::Io(_) => "io",
            MdamError::Serde(_) => "serde",
        }
    }
}
