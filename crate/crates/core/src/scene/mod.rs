//! Scene domain types and the on-disk scene bundle.
//!
//! A bundle directory holds four files:
//!
//! * `cloud.ply` - binary little-endian PLY, float32 `x,y,z`, optional uchar `red,green,blue`
//! * `frames.json` - posed camera frames (world-to-camera extrinsics)
//! * `task.json` - the task instruction and an optional ground-truth mask path
//! * `embeddings.bin` - image/text embeddings keyed by record name
//!
//! Point order is preserved exactly from the PLY file, so mask index `i` always
//! refers to the `i`-th vertex.

mod bundle;
mod embeddings;
mod mask_io;
mod ply;

pub use bundle::{load_scene_bundle, write_scene_bundle, SceneBundle, WORLD_TO_CAMERA};
pub use embeddings::{
    concept_record_name, frame_record_name, read_embeddings, write_embeddings, EmbeddingTable, TASK_RECORD,
};
pub use mask_io::{read_mask, read_mask_entries, write_mask};
pub use ply::{read_ply, write_ply};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Embedding dimension shared by image and text encoders.
pub const EMBEDDING_DIM: usize = 512;

/// Tolerance for the rotation orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY {path}: {reason}")]
    MalformedPly { path: PathBuf, reason: String },
    #[error("malformed {path}: {reason}")]
    MalformedJson { path: PathBuf, reason: String },
    #[error("frame {frame}: rotation is not orthonormal with det +1 ({reason})")]
    NonOrthonormalRotation { frame: String, reason: String },
    #[error("frame {frame}: unsupported extrinsics convention {convention:?}")]
    UnsupportedConvention { frame: String, convention: String },
    #[error("frame {frame}: {reason}")]
    InvalidFrame { frame: String, reason: String },
    #[error("{path}: record {name:?} has dimension {found}, expected {expected}")]
    EmbeddingDimensionMismatch { path: PathBuf, name: String, expected: usize, found: usize },
    #[error("malformed embeddings file {path}: {reason}")]
    MalformedEmbeddings { path: PathBuf, reason: String },
    #[error("no embedding record named {0:?}")]
    MissingEmbedding(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("task instruction is empty")]
    EmptyTask,
    #[error("affordance concept set is empty")]
    EmptyConceptSet,
    #[error("malformed mask file {path} line {line}: {reason}")]
    MalformedMask { path: PathBuf, line: usize, reason: String },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SceneError {
    let path = path.into();
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            SceneError::MissingFile(path)
        } else {
            SceneError::Io { path, source }
        }
    }
}

/// A scene point cloud with optional per-point colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    id: String,
    points: Vec<[f32; 3]>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<[f32; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self, SceneError> {
        if points.is_empty() {
            return Err(SceneError::InvalidCloud("cloud has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(SceneError::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(SceneError::InvalidCloud(format!("{} colors for {} points", c.len(), points.len())));
            }
        }
        Ok(Self { id: id.into(), points, colors })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// All coordinates widened to f64 (exact).
    pub fn positions(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

/// Dense per-pixel depth in meters, row-major. Zero or non-finite values mark missing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, String> {
        if values.len() != width as usize * height as usize {
            return Err(format!("depth map has {} values, expected {}x{}", values.len(), width, height));
        }
        Ok(Self { width, height, values })
    }

    /// Valid depth at pixel (`col`, `row`), if any.
    pub fn at(&self, col: u32, row: u32) -> Option<f64> {
        let d = self.values[row as usize * self.width as usize + col as usize];
        (d.is_finite() && d > 0.0).then_some(d as f64)
    }
}

/// A calibrated, posed camera frame. Extrinsics map world to camera:
/// `x_cam = R * x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub id: String,
    pub intrinsics: [[f64; 3]; 3],
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
    pub image_path: String,
    pub depth_path: Option<String>,
    pub depth: Option<DepthMap>,
}

impl CameraFrame {
    /// Checks intrinsics and the rotation invariants.
    pub fn validate(&self) -> Result<(), SceneError> {
        let k = &self.intrinsics;
        let bad = |reason: String| SceneError::InvalidFrame { frame: self.id.clone(), reason };
        if k.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("intrinsics contain non-finite values".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(bad(format!("focal lengths must be positive (fx={}, fy={})", k[0][0], k[1][1])));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err(bad("intrinsics must be upper triangular with K[2][2]=1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("image dimensions must be positive".into()));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(bad("translation contains non-finite values".into()));
        }
        if let Some(d) = &self.depth {
            if d.width != self.width || d.height != self.height {
                return Err(bad(format!(
                    "depth map is {}x{}, frame is {}x{}",
                    d.width, d.height, self.width, self.height
                )));
            }
        }
        check_rotation(&self.rotation)
            .map_err(|reason| SceneError::NonOrthonormalRotation { frame: self.id.clone(), reason })
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        let mut c = [0.0; 3];
        for (j, cj) in c.iter_mut().enumerate() {
            *cj = -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]);
        }
        c
    }

    pub fn contains_pixel(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }
}

fn check_rotation(r: &[[f64; 3]; 3]) -> Result<(), String> {
    if r.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite entries".into());
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() >= ROTATION_TOLERANCE {
        return Err(format!("det(R) = {det}"));
    }
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            if (dot - expected).abs() >= ROTATION_TOLERANCE {
                return Err(format!("(RᵀR)[{i}][{j}] = {dot}"));
            }
        }
    }
    Ok(())
}

/// A natural-language task instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstruction {
    text: String,
}

impl TaskInstruction {
    pub fn new(text: impl Into<String>) -> Result<Self, SceneError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(SceneError::EmptyTask);
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Ordered, duplicate-free affordance concepts extracted from a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffordanceConceptSet {
    concepts: Vec<String>,
}

impl AffordanceConceptSet {
    /// Deduplicates while keeping first-occurrence order. Blank entries are dropped.
    pub fn from_raw<I, S>(raw: I) -> Result<Self, SceneError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut concepts: Vec<String> = Vec::new();
        for c in raw {
            let c = c.into();
            if c.trim().is_empty() || concepts.contains(&c) {
                continue;
            }
            concepts.push(c);
        }
        if concepts.is_empty() {
            return Err(SceneError::EmptyConceptSet);
        }
        Ok(Self { concepts })
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

/// A fixed-dimension embedding with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, SceneError> {
        if values.len() != EMBEDDING_DIM {
            return Err(SceneError::InvalidEmbedding(format!("dimension {} (expected {EMBEDDING_DIM})", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::InvalidEmbedding("non-finite entry".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// A per-point binary mask over a cloud, optionally with per-point scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    flags: Vec<bool>,
    scores: Option<Vec<f64>>,
}

impl Mask3D {
    pub fn new(flags: Vec<bool>, scores: Option<Vec<f64>>) -> Result<Self, SceneError> {
        if let Some(s) = &scores {
            if s.len() != flags.len() {
                return Err(SceneError::InvalidMask(format!("{} scores for {} flags", s.len(), flags.len())));
            }
            if let Some(i) = s.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(SceneError::InvalidMask(format!("score {} at index {i} outside [0,1]", s[i])));
            }
        }
        Ok(Self { flags, scores })
    }

    pub fn empty(len: usize) -> Self {
        Self { flags: vec![false; len], scores: None }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut flags = vec![false; len];
        for i in indices {
            flags[i] = true;
        }
        Self { flags, scores: None }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.flags.iter().enumerate().filter_map(|(i, &f)| f.then_some(i)).collect()
    }

    /// Score of point `i`: the stored score, or 1/0 from the flag.
    pub fn score(&self, i: usize) -> f64 {
        match &self.scores {
            Some(s) => s[i],
            None => f64::from(u8::from(self.flags[i])),
        }
    }

    /// Mean score over flagged points; 0 for an empty mask.
    pub fn confidence(&self) -> f64 {
        let idx = self.indices();
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().map(|&i| self.score(i)).sum::<f64>() / idx.len() as f64
    }
}
