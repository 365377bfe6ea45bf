//! Shared trunk, phoneme and viseme branches, DropPath fusion, and the
//! character encoder/decoder with CTC and attention heads.

mod activation;
mod batch;
mod checkpoint;
mod config;
pub mod layers;
mod network;
mod params;

pub use activation::ActivationConfig;
pub use batch::Batch;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use network::{fuse, fuse_sum, BranchKind, DecodeMethod, DropMasks, ForwardOutputs, Fusion, Model};
pub use params::{Bound, Group, Param, ParamId, ParamStore};

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("branch {0} is not present in this model")]
    MissingBranch(Group),
    #[error("training forward needs char targets")]
    MissingTargets,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
