//! On-disk records passed between stages.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bridge::{ManipulablePoint2D, VerifyMode};
use crate::lift::CropRegion;
use crate::select::FrameScore;

pub const SCORES_FILE: &str = "scores.json";
pub const POINTS_FILE: &str = "points.json";
pub const MASKS_DIR: &str = "masks";
pub const CROP_FILE: &str = "crop.json";
pub const MASK_FILE: &str = "mask.txt";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFrame {
    #[serde(flatten)]
    pub score: FrameScore,
    /// 1-based.
    pub rank: usize,
}

/// Output of frame selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresRecord {
    pub alpha_a: f64,
    pub top_k: usize,
    pub concepts: Vec<String>,
    pub frames: Vec<RankedFrame>,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePoints {
    pub frame_id: String,
    pub points: Vec<ManipulablePoint2D>,
    /// File name inside the masks directory, when the frame yielded points.
    pub mask: Option<String>,
}

/// Output of detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointsRecord {
    pub task: String,
    pub concepts: Vec<String>,
    pub verify_mode: VerifyMode,
    pub frames: Vec<FramePoints>,
    pub client_calls: BTreeMap<String, usize>,
}

/// A 2D mask file in the masks directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedFrame {
    pub frame_id: String,
    pub points: usize,
}

/// Output of lifting: the crop plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub cloud_id: String,
    pub cloud_size: usize,
    /// Indices flagged by the merged initial mask.
    pub seeds: Vec<usize>,
    pub indices: Vec<usize>,
    pub init_flags: Vec<bool>,
    pub centroid: [f64; 3],
    pub depth_tol: f64,
    pub n_crop: usize,
    pub min_votes: usize,
    pub lifted: Vec<LiftedFrame>,
}

impl CropRecord {
    pub fn region(&self) -> CropRegion {
        CropRegion { indices: self.indices.clone(), init_flags: self.init_flags.clone(), centroid: self.centroid }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_ms: f64,
    /// Deterministic work counters (dot products, client calls, points).
    pub work: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
}

impl TimingReport {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
