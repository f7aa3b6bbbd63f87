//! Browser demo over a synthetic cabinet scene: frame ranking, per-view detection and
//! lifting, and crop growth. Every export returns a JSON string for the page script.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tasa_core::bridge::{double_check, extract_concepts, segment_at_points, VerifyMode};
use tasa_core::lift::{crop_neighbors, lift_mask, merge_initial_masks, project_point, Projection};
use tasa_core::metrics::iou;
use tasa_core::scene::{concept_record_name, AffordanceConceptSet, EmbeddingVector};
use tasa_core::select::{rank_frames, select_top_k, SelectionConfig};
use tasa_core::spatial::SpatialIndex;
use tasa_core::synth::{generate, SynthConfig, SynthScene};

#[derive(Serialize)]
struct RankedFrame {
    id: String,
    sim_clip: f64,
    affordance: f64,
    final_score: f64,
    selected: bool,
    /// Whether the synthetic camera is aimed at the handle.
    handle_view: bool,
}

#[derive(Serialize)]
struct Ranking {
    frames: Vec<RankedFrame>,
    dot_products: usize,
}

#[derive(Serialize)]
struct DetectedPoint {
    x: u32,
    y: u32,
    provenance: String,
}

#[derive(Serialize)]
struct View {
    id: String,
    width: u32,
    height: u32,
    /// Run lengths of the segmenter mask, starting with unset pixels.
    mask_runs: Vec<u32>,
    points: Vec<DetectedPoint>,
    /// `[u, v, lifted, ground truth]` for every cloud point in the image.
    projected: Vec<(f32, f32, bool, bool)>,
    lifted: usize,
}

#[derive(Serialize)]
struct Crop {
    /// `x, y, z` per cloud point, flattened.
    positions: Vec<f32>,
    /// 0 outside the crop, 1 grown neighbor, 2 lifted seed.
    state: Vec<u8>,
    ground_truth: Vec<bool>,
    selected: Vec<String>,
    seeds: usize,
    crop: usize,
    /// IoU of the lifted seeds against the ground truth.
    seed_iou: f64,
}

/// Errors cross into JavaScript as thrown strings.
fn js<E: std::fmt::Display>(e: E) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo records serialize")
}

#[wasm_bindgen]
pub struct Demo {
    scene: SynthScene,
    concepts: AffordanceConceptSet,
}

impl Demo {
    pub fn build(frames: usize, seed: u64) -> Result<Demo, String> {
        let scene = generate(&SynthConfig { frames: frames.max(1), seed, ..SynthConfig::default() });
        let concepts = extract_concepts(&scene.oracle, &scene.bundle.task).map_err(|e| e.to_string())?;
        Ok(Demo { scene, concepts })
    }

    fn ranked(&self, alpha_a: f64, top_k: usize) -> Result<(tasa_core::select::Ranking, Vec<String>), String> {
        let b = &self.scene.bundle;
        let task = b.task_embedding().map_err(|e| e.to_string())?;
        let concepts: Vec<&EmbeddingVector> = self
            .concepts
            .concepts()
            .iter()
            .map(|c| b.embeddings.require(&concept_record_name(c)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let ranking =
            rank_frames(b, task, &concepts, &SelectionConfig { alpha_a, top_k }).map_err(|e| e.to_string())?;
        let selected = select_top_k(&ranking.scores, top_k);
        Ok((ranking, selected))
    }

    pub fn ranking_json(&self, alpha_a: f64, top_k: usize) -> Result<String, String> {
        let (ranking, selected) = self.ranked(alpha_a, top_k)?;
        let frames = ranking
            .scores
            .iter()
            .map(|s| RankedFrame {
                id: s.frame_id.clone(),
                sim_clip: s.sim_clip,
                affordance: s.affordance_score,
                final_score: s.final_score,
                selected: selected.contains(&s.frame_id),
                handle_view: self.scene.handle_frames.contains(&s.frame_id),
            })
            .collect();
        Ok(to_json(&Ranking { frames, dot_products: ranking.dot_products }))
    }

    /// Double-checked points, the segmenter mask and the lifted cloud indices of one frame.
    fn detect(&self, frame_id: &str, depth_tol: f64) -> Result<(View, Vec<usize>), String> {
        let b = &self.scene.bundle;
        let frame = b.frame(frame_id).ok_or_else(|| format!("no frame {frame_id}"))?;
        let points = double_check(&self.scene.oracle, frame, &b.task, &self.concepts, VerifyMode::Strict)
            .map_err(|e| e.to_string())?;
        let (mask_runs, lifted) = if points.is_empty() {
            (vec![frame.width * frame.height], Vec::new())
        } else {
            let mask = segment_at_points(&self.scene.oracle, frame, &points).map_err(|e| e.to_string())?;
            let lifted = lift_mask(&mask, frame, &b.cloud, depth_tol).map_err(|e| e.to_string())?;
            (mask.to_rle().counts, lifted)
        };
        let gt = self.scene.ground_truth.flags();
        let mut is_lifted = vec![false; b.cloud.len()];
        for &i in &lifted {
            is_lifted[i] = true;
        }
        let projected = (0..b.cloud.len())
            .filter_map(|i| {
                let p = project_point(&b.cloud.point(i), frame);
                p.pixel(frame)?;
                match p {
                    Projection::Visible { u, v, .. } => Some((u as f32, v as f32, is_lifted[i], gt[i])),
                    Projection::Behind => None,
                }
            })
            .collect();
        let view = View {
            id: frame_id.to_string(),
            width: frame.width,
            height: frame.height,
            mask_runs,
            points: points
                .iter()
                .map(|p| DetectedPoint { x: p.x, y: p.y, provenance: format!("{:?}", p.provenance) })
                .collect(),
            projected,
            lifted: lifted.len(),
        };
        Ok((view, lifted))
    }

    pub fn view_json(&self, frame_id: &str, depth_tol: f64) -> Result<String, String> {
        self.detect(frame_id, depth_tol).map(|(v, _)| to_json(&v))
    }

    pub fn crop_json(&self, alpha_a: f64, top_k: usize, n_crop: usize, depth_tol: f64) -> Result<String, String> {
        let b = &self.scene.bundle;
        let (_, selected) = self.ranked(alpha_a, top_k)?;
        let mut per_frame = Vec::with_capacity(selected.len());
        for id in &selected {
            per_frame.push(self.detect(id, depth_tol)?.1);
        }
        let m_init = merge_initial_masks(&per_frame, b.cloud.len(), 1);
        let gt = self.scene.ground_truth.flags();
        let mut state = vec![0u8; b.cloud.len()];
        let mut crop_len = 0;
        if m_init.count() > 0 {
            let index = SpatialIndex::build(b.cloud.positions());
            let crop = crop_neighbors(&b.cloud, &m_init, &index, n_crop.max(1)).map_err(|e| e.to_string())?;
            for (&i, &seed) in crop.indices.iter().zip(&crop.init_flags) {
                state[i] = if seed { 2 } else { 1 };
            }
            crop_len = crop.len();
        }
        Ok(to_json(&Crop {
            positions: b.cloud.points().iter().flatten().copied().collect(),
            state,
            ground_truth: gt.to_vec(),
            selected,
            seeds: m_init.count(),
            crop: crop_len,
            seed_iou: iou(m_init.flags(), gt).map_err(|e| e.to_string())?,
        }))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(frames: usize, seed: u32) -> Result<Demo, JsValue> {
        Demo::build(frames, seed.into()).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn task(&self) -> String {
        self.scene.bundle.task.text().to_string()
    }

    /// All frames in rank order with their scores and whether they are in the top K.
    pub fn rank(&self, alpha_a: f64, top_k: usize) -> Result<String, JsValue> {
        self.ranking_json(alpha_a, top_k).map_err(js)
    }

    /// Detection and lifting on one frame, seen through that frame's camera.
    pub fn view(&self, frame_id: &str, depth_tol: f64) -> Result<String, JsValue> {
        self.view_json(frame_id, depth_tol).map_err(js)
    }

    /// Lifted seeds from the top-K frames grown into a crop of `n_crop` points.
    pub fn crop(&self, alpha_a: f64, top_k: usize, n_crop: usize, depth_tol: f64) -> Result<String, JsValue> {
        self.crop_json(alpha_a, top_k, n_crop, depth_tol).map_err(js)
    }
}
