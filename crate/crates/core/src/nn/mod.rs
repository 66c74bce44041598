//! Dense neural networks with reverse-mode differentiation.
//!
//! Forward passes are recorded on a [`Tape`]; [`Tape::backward`] returns
//! gradients aligned with the flat [`ParamStore`]. On top sit [`Mlp`],
//! the full graph-network block [`GnBlock`] and the
//! [`EncodeProcessDecode`] stack.

mod checkpoint;
mod gn;
mod matrix;
mod mlp;
mod params;
mod tape;

use thiserror::Error;

pub use checkpoint::{
    checkpoint_paths, load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION,
};
pub use gn::{
    EncodeProcessDecode, GnBlock, GnGraph, GnNodes, GnnConfig, Independent, Widths, Wiring,
};
pub use matrix::Matrix;
pub use mlp::Mlp;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, NodeId, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("bad parameter manifest: {0}")]
    Manifest(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
