//! Point transformer refinement network and its trainer.

mod checkpoint;
mod geometry;
mod layer;
mod model;
mod train;

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, MAGIC as CHECKPOINT_MAGIC,
};
pub use geometry::{
    centroid, fps_downsample, fps_from, geometric_start, interpolate, interpolation_weights, knn_neighbors, INTERP_EPS,
    INTERP_NEIGHBORS,
};
pub use layer::{
    he_uniform, pt_layer_forward, AttentionMode, Bound, Linear, Mlp2, Neighborhood, ParamId, ParamStore, PtLayerOutput,
    PtLayerParams,
};
pub use model::{CropGeometry, Level, NetworkConfig, RefineNet, StageConfig, INPUT_CHANNELS};
pub use train::{train, TrainReport, TrainingExample};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("k = {k} neighbors requested from {n} points")]
    KExceedsPointCount { k: usize, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("crop is empty")]
    EmptyCrop,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("network produced non-finite logits")]
    NonFiniteOutput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
}
