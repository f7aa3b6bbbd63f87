//! Affordance-weighted frame ranking and top-K selection.
//!
//! Each frame gets a contextual score (cosine similarity between its image embedding
//! and the task text embedding) and an affordance score `S`. For every concept the raw
//! logits `e_concept · e_frame` are softmax-normalized across the frame set; `S` is the
//! mean of those per-concept weights, so the scores of all frames sum to one. The two
//! are blended as `alpha_a * sim + (1 - alpha_a) * S`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{EmbeddingVector, SceneBundle, SceneError};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("embedding has zero norm")]
    ZeroNormVector,
    #[error("no frames to score")]
    EmptyFrameList,
    #[error("no affordance concepts to score against")]
    EmptyConceptList,
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub alpha_a: f64,
    pub top_k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { alpha_a: 0.5, top_k: 10 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if !(0.0..=1.0).contains(&self.alpha_a) {
            return Err(SelectError::InvalidConfig(format!("alpha_a = {} outside [0,1]", self.alpha_a)));
        }
        if self.top_k == 0 {
            return Err(SelectError::InvalidConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_id: String,
    pub sim_clip: f64,
    pub affordance_score: f64,
    pub final_score: f64,
}

/// Ranked scores plus the number of embedding dot products spent computing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub scores: Vec<FrameScore>,
    pub dot_products: usize,
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, SelectError> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(SelectError::ZeroNormVector);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-frame affordance score `S`, in input frame order.
pub fn affordance_scores(
    frame_embs: &[&EmbeddingVector],
    concept_embs: &[&EmbeddingVector],
) -> Result<Vec<f64>, SelectError> {
    if frame_embs.is_empty() {
        return Err(SelectError::EmptyFrameList);
    }
    if concept_embs.is_empty() {
        return Err(SelectError::EmptyConceptList);
    }
    let mut s = vec![0.0; frame_embs.len()];
    let mut logits = vec![0.0; frame_embs.len()];
    for concept in concept_embs {
        for (l, f) in logits.iter_mut().zip(frame_embs) {
            *l = concept.dot(f);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        for (acc, e) in s.iter_mut().zip(&logits) {
            *acc += e / z;
        }
    }
    let k = concept_embs.len() as f64;
    Ok(s.into_iter().map(|v| v / k).collect())
}

/// Scores and ranks `(frame id, embedding)` pairs. Output order is descending
/// `final_score`, ties by ascending frame id, independent of input order.
pub fn rank_embeddings(
    frames: &[(&str, &EmbeddingVector)],
    task_emb: &EmbeddingVector,
    concept_embs: &[&EmbeddingVector],
    alpha_a: f64,
) -> Result<Ranking, SelectError> {
    if frames.is_empty() {
        return Err(SelectError::EmptyFrameList);
    }
    let mut canonical: Vec<(&str, &EmbeddingVector)> = frames.to_vec();
    canonical.sort_by(|a, b| a.0.cmp(b.0));
    let embs: Vec<&EmbeddingVector> = canonical.iter().map(|f| f.1).collect();
    let s = affordance_scores(&embs, concept_embs)?;
    let mut scores = Vec::with_capacity(canonical.len());
    for ((id, emb), affordance_score) in canonical.iter().zip(s) {
        let sim_clip = cosine_similarity(emb, task_emb)?;
        scores.push(FrameScore {
            frame_id: id.to_string(),
            sim_clip,
            affordance_score,
            final_score: alpha_a * sim_clip + (1.0 - alpha_a) * affordance_score,
        });
    }
    sort_scores(&mut scores);
    Ok(Ranking { scores, dot_products: canonical.len() * (concept_embs.len() + 1) })
}

pub(crate) fn sort_scores(scores: &mut [FrameScore]) {
    scores.sort_by(|a, b| b.final_score.total_cmp(&a.final_score).then_with(|| a.frame_id.cmp(&b.frame_id)));
}

/// Ranks every frame of a bundle against the task and concept embeddings.
pub fn rank_frames(
    bundle: &SceneBundle,
    task_emb: &EmbeddingVector,
    concept_embs: &[&EmbeddingVector],
    cfg: &SelectionConfig,
) -> Result<Ranking, SelectError> {
    cfg.validate()?;
    let frames = bundle
        .frames
        .iter()
        .map(|f| Ok((f.id.as_str(), bundle.frame_embedding(&f.id)?)))
        .collect::<Result<Vec<_>, SceneError>>()?;
    rank_embeddings(&frames, task_emb, concept_embs, cfg.alpha_a)
}

/// The first `min(k, N)` frame ids in rank order.
pub fn select_top_k(scores: &[FrameScore], k: usize) -> Vec<String> {
    scores.iter().take(k).map(|s| s.frame_id.clone()).collect()
}
