use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::embeddings::{frame_record_name, read_embeddings, write_embeddings, TASK_RECORD};
use super::ply::{read_ply, write_ply};
use super::{
    io_err, read_mask, CameraFrame, DepthMap, EmbeddingTable, EmbeddingVector, Mask3D, PointCloud, SceneError,
    TaskInstruction,
};

/// The only accepted value of a frame's `convention` field.
pub const WORLD_TO_CAMERA: &str = "world_to_camera";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    id: String,
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "Rt")]
    rt: Vec<f64>,
    convention: String,
    width: u32,
    height: u32,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth_mask: Option<String>,
}

/// A fully validated unit of work: cloud, posed frames, embeddings and task.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub root: PathBuf,
    pub cloud: PointCloud,
    pub frames: Vec<CameraFrame>,
    pub task: TaskInstruction,
    /// Ground-truth mask path relative to `root`.
    pub ground_truth_mask: Option<String>,
    pub embeddings: EmbeddingTable,
}

impl SceneBundle {
    pub fn frame(&self, id: &str) -> Option<&CameraFrame> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn frame_embedding(&self, id: &str) -> Result<&EmbeddingVector, SceneError> {
        self.embeddings.require(&frame_record_name(id))
    }

    pub fn task_embedding(&self) -> Result<&EmbeddingVector, SceneError> {
        self.embeddings.require(TASK_RECORD)
    }

    pub fn ground_truth(&self) -> Option<Result<Mask3D, SceneError>> {
        self.ground_truth_mask.as_ref().map(|p| read_mask(&self.root.join(p), self.cloud.len()))
    }
}

fn frame_from_record(rec: FrameRecord, root: &Path) -> Result<CameraFrame, SceneError> {
    let bad = |reason: String| SceneError::InvalidFrame { frame: rec.id.clone(), reason };
    if rec.convention != WORLD_TO_CAMERA {
        return Err(SceneError::UnsupportedConvention { frame: rec.id.clone(), convention: rec.convention.clone() });
    }
    if rec.k.len() != 9 {
        return Err(bad(format!("K has {} entries, expected 9", rec.k.len())));
    }
    if rec.rt.len() != 12 {
        return Err(bad(format!("Rt has {} entries, expected 12", rec.rt.len())));
    }
    let mut intrinsics = [[0.0; 3]; 3];
    let mut rotation = [[0.0; 3]; 3];
    let mut translation = [0.0; 3];
    for r in 0..3 {
        for c in 0..3 {
            intrinsics[r][c] = rec.k[r * 3 + c];
            rotation[r][c] = rec.rt[r * 4 + c];
        }
        translation[r] = rec.rt[r * 4 + 3];
    }
    let depth = match &rec.depth {
        Some(rel) => Some(read_depth(&root.join(rel), rec.width, rec.height).map_err(|e| match e {
            SceneError::MalformedJson { reason, .. } => bad(reason),
            other => other,
        })?),
        None => None,
    };
    let frame = CameraFrame {
        id: rec.id,
        intrinsics,
        rotation,
        translation,
        width: rec.width,
        height: rec.height,
        image_path: rec.image,
        depth_path: rec.depth,
        depth,
    };
    frame.validate()?;
    Ok(frame)
}

fn frame_to_record(f: &CameraFrame) -> FrameRecord {
    let mut rt = Vec::with_capacity(12);
    for r in 0..3 {
        rt.extend_from_slice(&f.rotation[r]);
        rt.push(f.translation[r]);
    }
    FrameRecord {
        id: f.id.clone(),
        k: f.intrinsics.iter().flatten().copied().collect(),
        rt,
        convention: WORLD_TO_CAMERA.into(),
        width: f.width,
        height: f.height,
        image: f.image_path.clone(),
        depth: f.depth_path.clone(),
    }
}

fn read_depth(path: &Path, width: u32, height: u32) -> Result<DepthMap, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(SceneError::MalformedJson {
            path: path.to_path_buf(),
            reason: "depth file length is not a multiple of 4".into(),
        });
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    DepthMap::new(width, height, values)
        .map_err(|reason| SceneError::MalformedJson { path: path.to_path_buf(), reason })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| SceneError::MalformedJson { path: path.to_path_buf(), reason: e.to_string() })
}

/// Loads and validates a bundle directory. Fails on the first invalid file or frame.
pub fn load_scene_bundle(dir: &Path) -> Result<SceneBundle, SceneError> {
    for name in ["cloud.ply", "frames.json", "task.json", "embeddings.bin"] {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(SceneError::MissingFile(p));
        }
    }
    let cloud = read_ply(&dir.join("cloud.ply"))?;
    let records: Vec<FrameRecord> = read_json(&dir.join("frames.json"))?;
    let mut seen = HashSet::new();
    let mut frames = Vec::with_capacity(records.len());
    for rec in records {
        if !seen.insert(rec.id.clone()) {
            return Err(SceneError::InvalidFrame { frame: rec.id, reason: "duplicate frame id".into() });
        }
        frames.push(frame_from_record(rec, dir)?);
    }
    if frames.is_empty() {
        return Err(SceneError::MalformedJson { path: dir.join("frames.json"), reason: "no frames".into() });
    }
    let task_rec: TaskRecord = read_json(&dir.join("task.json"))?;
    let task = TaskInstruction::new(task_rec.text)?;
    let embeddings = read_embeddings(&dir.join("embeddings.bin"))?;
    for f in &frames {
        embeddings.require(&frame_record_name(&f.id))?;
    }
    embeddings.require(TASK_RECORD)?;
    Ok(SceneBundle {
        root: dir.to_path_buf(),
        cloud,
        frames,
        task,
        ground_truth_mask: task_rec.ground_truth_mask,
        embeddings,
    })
}

/// Writes a bundle into `dir` (created if needed), including any depth maps.
pub fn write_scene_bundle(bundle: &SceneBundle, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_ply(&bundle.cloud, &dir.join("cloud.ply"))?;
    for f in &bundle.frames {
        if let (Some(rel), Some(depth)) = (&f.depth_path, &f.depth) {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let bytes: Vec<u8> = depth.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
    }
    let frames: Vec<FrameRecord> = bundle.frames.iter().map(frame_to_record).collect();
    let frames_path = dir.join("frames.json");
    fs::write(&frames_path, serde_json::to_string_pretty(&frames).unwrap()).map_err(io_err(&frames_path))?;
    let task = TaskRecord { text: bundle.task.text().to_string(), ground_truth_mask: bundle.ground_truth_mask.clone() };
    let task_path = dir.join("task.json");
    fs::write(&task_path, serde_json::to_string_pretty(&task).unwrap()).map_err(io_err(&task_path))?;
    write_embeddings(&bundle.embeddings, &dir.join("embeddings.bin"))
}
