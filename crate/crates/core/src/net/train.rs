use serde::{Deserialize, Serialize};

use super::model::{CropGeometry, RefineNet};
use super::NetError;
use crate::autodiff::{Graph, Tensor};
use crate::lift::CropRegion;
use crate::metrics::{total_loss_grad, LossConfig};
use crate::scene::{Mask3D, PointCloud};

/// One crop with per-point targets in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub geometry: CropGeometry,
    pub labels: Vec<f64>,
}

impl TrainingExample {
    pub fn new(geometry: CropGeometry, labels: Vec<f64>) -> Result<Self, NetError> {
        if labels.len() != geometry.len() {
            return Err(NetError::ShapeMismatch(format!(
                "{} labels for a crop of {} points",
                labels.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, labels })
    }

    pub fn from_crop(crop: &CropRegion, cloud: &PointCloud, gt: &Mask3D, net: &RefineNet) -> Result<Self, NetError> {
        if gt.len() != cloud.len() {
            return Err(NetError::ShapeMismatch(format!(
                "ground truth has {} points, cloud has {}",
                gt.len(),
                cloud.len()
            )));
        }
        let geometry = CropGeometry::build(&crop.positions(cloud), &crop.init_flags, net.config())?;
        let labels = crop.indices.iter().map(|&i| if gt.flags()[i] { 1.0 } else { 0.0 }).collect();
        Self::new(geometry, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the dataset at the start of each step.
    pub losses: Vec<f64>,
}

/// Full-batch momentum gradient descent: `v ← μv + ∇L`, `θ ← θ − ηv`. Parameters are
/// rounded to f32 after the last step so a saved checkpoint reproduces the model exactly.
pub fn train(net: &mut RefineNet, data: &[TrainingExample], loss: &LossConfig) -> Result<TrainReport, NetError> {
    loss.validate().map_err(|e| NetError::InvalidConfig(e.to_string()))?;
    let cfg = net.config().clone();
    cfg.validate()?;
    if data.is_empty() {
        return Err(NetError::InvalidConfig("training set is empty".into()));
    }
    let mut velocity: Vec<Tensor> = net.params().iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / data.len() as f64;

    for step in 0..cfg.steps {
        let mut grads: Vec<Tensor> = velocity.iter().map(|v| Tensor::zeros(v.rows(), v.cols())).collect();
        let mut total = 0.0;
        for ex in data {
            let mut g = Graph::new();
            let bound = net.params().bind(&mut g);
            let logits = net.forward_graph(&mut g, &bound, &ex.geometry)?;
            let probs = g.sigmoid(logits);
            let lg = total_loss_grad(g.value(probs).data(), &ex.labels, loss)
                .map_err(|e| NetError::InvalidConfig(e.to_string()))?;
            if !lg.value.is_finite() {
                return Err(NetError::NonFiniteLoss { step });
            }
            total += lg.value * scale;
            let n = ex.labels.len();
            let root = g.custom_scalar(probs, lg.value, Tensor::new(n, 1, lg.grad));
            g.backward(root);
            for (acc, &var) in grads.iter_mut().zip(bound.vars()) {
                if let Some(gr) = g.grad(var) {
                    for (a, x) in acc.data_mut().iter_mut().zip(gr.data()) {
                        *a += x * scale;
                    }
                }
            }
        }
        if grads.iter().any(|gr| !gr.is_finite()) {
            return Err(NetError::NonFiniteLoss { step });
        }
        losses.push(total);
        log::debug!("step {step}: loss {total:.6}");
        for ((param, vel), grad) in net.params_mut().tensors_mut().iter_mut().zip(&mut velocity).zip(&grads) {
            for ((p, v), gr) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
                *v = cfg.momentum * *v + gr;
                *p -= cfg.learning_rate * *v;
            }
        }
    }
    net.round_to_f32();
    Ok(TrainReport { losses })
}
