//! Instance-level affordance evaluation: AP over IoU thresholds and mean IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricError;

/// IoU thresholds `0.50, 0.55, ..., 0.95`, built from integer percents so that
/// values like 0.6 compare exactly.
pub fn map_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|p| p as f64 / 100.0).collect()
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch { left: pred.len(), right: gt.len() });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(ratio(inter, union))
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of two strictly ascending index lists.
pub fn iou_indices(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    ratio(inter, a.len() + b.len() - inter)
}

/// A predicted instance: the flagged point indices (ascending) and a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    pub id: String,
    pub confidence: f64,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    /// IoU of the highest-confidence prediction (0 without predictions).
    pub iou: f64,
    pub best_prediction: Option<String>,
    pub predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    /// `(threshold, AP)` for each mAP threshold.
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub per_task: Vec<TaskResult>,
}

struct Candidate<'a> {
    task: &'a str,
    mask: &'a ScoredMask,
    iou: f64,
}

/// Confidence-ranked AP with greedy matching: each ground truth is claimed by the
/// highest-confidence unmatched prediction whose IoU reaches `thr`.
fn average_precision(ranked: &[Candidate<'_>], num_gt: usize, thr: f64) -> f64 {
    if num_gt == 0 || ranked.is_empty() {
        return 0.0;
    }
    let mut matched: BTreeMap<&str, bool> = BTreeMap::new();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (rank, c) in ranked.iter().enumerate() {
        let claimed = matched.entry(c.task).or_insert(false);
        if !*claimed && c.iou >= thr {
            *claimed = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Interpolated precision: the best precision at any equal or higher recall.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// `ground_truths` maps task id to its single ground-truth index list (ascending).
pub fn evaluate(
    predictions: &BTreeMap<String, Vec<ScoredMask>>,
    ground_truths: &BTreeMap<String, Vec<usize>>,
) -> Result<EvalReport, MetricError> {
    for task in predictions.keys() {
        if !ground_truths.contains_key(task) {
            return Err(MetricError::MissingGroundTruth(task.clone()));
        }
    }
    for preds in predictions.values() {
        for p in preds {
            if !p.confidence.is_finite() {
                return Err(MetricError::InvalidPrediction(format!("{}: non-finite confidence", p.id)));
            }
            if p.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MetricError::InvalidPrediction(format!("{}: indices not strictly ascending", p.id)));
            }
        }
    }

    let mut ranked: Vec<Candidate<'_>> = predictions
        .iter()
        .flat_map(|(task, preds)| {
            let gt = &ground_truths[task];
            preds.iter().map(move |mask| Candidate { task, mask, iou: iou_indices(&mask.indices, gt) })
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.mask
            .confidence
            .total_cmp(&a.mask.confidence)
            .then_with(|| a.mask.id.cmp(&b.mask.id))
            .then_with(|| a.task.cmp(b.task))
    });

    let num_gt = ground_truths.len();
    let ap_per_threshold: Vec<(f64, f64)> =
        map_thresholds().into_iter().map(|t| (t, average_precision(&ranked, num_gt, t))).collect();
    let map = if ap_per_threshold.is_empty() {
        0.0
    } else {
        ap_per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / ap_per_threshold.len() as f64
    };
    let ap50 = average_precision(&ranked, num_gt, 0.5);
    let ap25 = average_precision(&ranked, num_gt, 0.25);

    let per_task: Vec<TaskResult> = ground_truths
        .keys()
        .map(|task| {
            let best = ranked.iter().find(|c| c.task == task);
            TaskResult {
                task: task.clone(),
                iou: best.map_or(0.0, |c| c.iou),
                best_prediction: best.map(|c| c.mask.id.clone()),
                predictions: predictions.get(task).map_or(0, Vec::len),
            }
        })
        .collect();
    let miou =
        if per_task.is_empty() { 0.0 } else { per_task.iter().map(|t| t.iou).sum::<f64>() / per_task.len() as f64 };
    Ok(EvalReport { map, ap50, ap25, miou, ap_per_threshold, per_task })
}
