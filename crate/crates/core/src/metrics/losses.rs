//! Segmentation losses over per-point probabilities, each with its analytic gradient.
//!
//! Probabilities are clamped to `[ε, 1−ε]` before every loss; the clamp has zero
//! derivative outside that interval.

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const PROB_EPS: f64 = 1e-7;
pub const SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { a1: 0.3, a2: 0.3, a3: 0.2, a4: 0.2 }
    }
}

impl LossWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(a1: f64, a2: f64, a3: f64, a4: f64) -> Result<Self, MetricError> {
        let w = Self { a1, a2, a3, a4 };
        w.validate()?;
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.a1, self.a2, self.a3, self.a4]
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let a = self.as_array();
        if a.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MetricError::InvalidWeights(format!("{a:?} has a negative or non-finite entry")));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(MetricError::InvalidWeights(format!("{a:?} sums to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Weights plus the focal-term shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub gamma: f64,
    pub alpha_f: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), gamma: 2.0, alpha_f: 0.25 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        self.weights.validate()?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(MetricError::InvalidWeights(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.alpha_f > 0.0 && self.alpha_f <= 1.0) {
            return Err(MetricError::InvalidWeights(format!("alpha_f {} not in (0, 1]", self.alpha_f)));
        }
        Ok(())
    }
}

/// A loss value and `d loss / d probs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check(probs: &[f64], labels: &[f64]) -> Result<(), MetricError> {
    if probs.len() != labels.len() {
        return Err(MetricError::LengthMismatch { left: probs.len(), right: labels.len() });
    }
    if probs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Clamped probability and the clamp's derivative.
fn clamp(p: f64) -> (f64, f64) {
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

pub fn bce_grad(probs: &[f64], labels: &[f64]) -> Result<LossGrad, MetricError> {
    check(probs, labels)?;
    let n = probs.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &l) in probs.iter().zip(labels) {
        let (pc, dc) = clamp(p);
        value -= l * pc.ln() + (1.0 - l) * (1.0 - pc).ln();
        grad.push(dc * (-l / pc + (1.0 - l) / (1.0 - pc)) / n);
    }
    Ok(LossGrad { value: value / n, grad })
}

pub fn dice_grad(probs: &[f64], labels: &[f64]) -> Result<LossGrad, MetricError> {
    check(probs, labels)?;
    let pcs: Vec<(f64, f64)> = probs.iter().map(|&p| clamp(p)).collect();
    let inter: f64 = pcs.iter().zip(labels).map(|((p, _), l)| p * l).sum();
    let sp: f64 = pcs.iter().map(|(p, _)| p).sum();
    let sl: f64 = labels.iter().sum();
    let num = 2.0 * inter + SMOOTHING;
    let den = sp + sl + SMOOTHING;
    let grad = pcs.iter().zip(labels).map(|(&(_, dc), &l)| -dc * (2.0 * l * den - num) / (den * den)).collect();
    Ok(LossGrad { value: 1.0 - num / den, grad })
}

pub fn focal_grad(probs: &[f64], labels: &[f64], gamma: f64, alpha_f: f64) -> Result<LossGrad, MetricError> {
    check(probs, labels)?;
    let n = probs.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &l) in probs.iter().zip(labels) {
        let (pc, dc) = clamp(p);
        // Soft labels interpolate the two class terms.
        let mut g = 0.0;
        for (pt, weight, sign) in [(pc, l, 1.0), (1.0 - pc, 1.0 - l, -1.0)] {
            if weight == 0.0 {
                continue;
            }
            let one_minus = 1.0 - pt;
            let modulator = one_minus.powf(gamma);
            value -= weight * alpha_f * modulator * pt.ln();
            let d_modulator = if gamma == 0.0 { 0.0 } else { -gamma * one_minus.powf(gamma - 1.0) };
            let d_pt = -alpha_f * (d_modulator * pt.ln() + modulator / pt);
            g += weight * sign * d_pt;
        }
        grad.push(dc * g / n);
    }
    Ok(LossGrad { value: value / n, grad })
}

pub fn soft_iou_grad(probs: &[f64], labels: &[f64]) -> Result<LossGrad, MetricError> {
    check(probs, labels)?;
    let pcs: Vec<(f64, f64)> = probs.iter().map(|&p| clamp(p)).collect();
    let inter: f64 = pcs.iter().zip(labels).map(|((p, _), l)| p * l).sum();
    let sp: f64 = pcs.iter().map(|(p, _)| p).sum();
    let sl: f64 = labels.iter().sum();
    let num = inter + SMOOTHING;
    let den = sp + sl - inter + SMOOTHING;
    let grad = pcs.iter().zip(labels).map(|(&(_, dc), &l)| -dc * (l * den - num * (1.0 - l)) / (den * den)).collect();
    Ok(LossGrad { value: 1.0 - num / den, grad })
}

pub fn total_loss_grad(probs: &[f64], labels: &[f64], cfg: &LossConfig) -> Result<LossGrad, MetricError> {
    cfg.validate()?;
    let w = cfg.weights.as_array();
    let terms = [
        bce_grad(probs, labels)?,
        dice_grad(probs, labels)?,
        focal_grad(probs, labels, cfg.gamma, cfg.alpha_f)?,
        soft_iou_grad(probs, labels)?,
    ];
    let mut value = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (wi, t) in w.iter().zip(&terms) {
        value += wi * t.value;
        for (g, tg) in grad.iter_mut().zip(&t.grad) {
            *g += wi * tg;
        }
    }
    Ok(LossGrad { value, grad })
}

pub fn bce(probs: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    bce_grad(probs, labels).map(|l| l.value)
}

pub fn dice(probs: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    dice_grad(probs, labels).map(|l| l.value)
}

pub fn focal(probs: &[f64], labels: &[f64], gamma: f64, alpha_f: f64) -> Result<f64, MetricError> {
    focal_grad(probs, labels, gamma, alpha_f).map(|l| l.value)
}

pub fn soft_iou_loss(probs: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    soft_iou_grad(probs, labels).map(|l| l.value)
}

pub fn total_loss(probs: &[f64], labels: &[f64], cfg: &LossConfig) -> Result<f64, MetricError> {
    total_loss_grad(probs, labels, cfg).map(|l| l.value)
}
