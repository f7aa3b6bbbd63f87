//! Training losses and evaluation metrics.

mod eval;
mod losses;

use thiserror::Error;

pub use eval::{evaluate, iou, iou_indices, map_thresholds, EvalReport, ScoredMask, TaskResult};
pub use losses::{
    bce, bce_grad, dice, dice_grad, focal, focal_grad, soft_iou_grad, soft_iou_loss, total_loss, total_loss_grad,
    LossConfig, LossGrad, LossWeights, PROB_EPS, SMOOTHING,
};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("loss over zero points")]
    Empty,
    #[error("invalid loss parameters: {0}")]
    InvalidWeights(String),
    #[error("no ground truth for task {0}")]
    MissingGroundTruth(String),
    #[error("invalid prediction {0}")]
    InvalidPrediction(String),
}
