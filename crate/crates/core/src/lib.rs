//! Compression of small decoder-only language models by replacing redundant
//! blocks with low-rank factors built from gradient-selected singular groups.

pub mod attribution;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod redundancy;
pub mod train;

pub use error::{CheckpointError, ErrorClass, GraspError, Result};
