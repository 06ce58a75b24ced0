use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GraspError> = std::result::Result<T, E>;

/// Coarse failure class, used by command-line drivers to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Infeasible,
}

#[derive(Debug, Error)]
pub enum GraspError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("infeasible compression target {target:.4}: at most {max_achievable:.4} is reachable")]
    InfeasibleRatio { target: f64, max_achievable: f64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl GraspError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Self::Validation(_) => ErrorClass::Config,
            Self::Data(_) | Self::Checkpoint(_) => ErrorClass::Data,
            Self::InfeasibleRatio { .. } => ErrorClass::Infeasible,
            Self::Shape { .. }
            | Self::DegenerateVector(_)
            | Self::Convergence { .. }
            | Self::NonFinite(_) => ErrorClass::Numeric,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in tensor `{tensor}`: manifest {expected:016x}, payload {actual:016x}")]
    Checksum {
        tensor: String,
        expected: u64,
        actual: u64,
    },

    #[error("tensor payload truncated: `{tensor}` needs bytes {offset}..{end} but tensors.bin has {available}")]
    Truncated {
        tensor: String,
        offset: u64,
        end: u64,
        available: u64,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),
}
