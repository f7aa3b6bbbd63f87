//! Procedural test scenes: a cabinet front (plane) with a protruding bar handle and a
//! low distractor panel, viewed by cameras that either look at the handle or at a far
//! corner. [`SyntheticOracle`] answers bridge requests from the scene geometry, so a
//! recorded transcript of it is a faithful fixture.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bridge::{
    double_check, extract_concepts, segment_at_points, write_transcript, BridgeOp, BridgeRequest, BridgeResponse,
    RecordingClient, RleMask, TranscriptEntry, TransportError, VerifyMode, VlmClient,
};
use crate::lift::{project_point, Projection};
use crate::scene::{
    concept_record_name, frame_record_name, write_mask, write_scene_bundle, CameraFrame, DepthMap, EmbeddingTable,
    EmbeddingVector, Mask3D, PointCloud, SceneBundle, SceneError, TaskInstruction, EMBEDDING_DIM, TASK_RECORD,
};

pub const TASK_TEXT: &str = "Pull the handle to open the cabinet";
pub const CONCEPT: &str = "handle";
pub const GROUND_TRUTH_FILE: &str = "gt.txt";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

/// Handle box: `x ∈ ±HALF_X`, `y ∈ ±HALF_Y`, protruding from the plane to `z = -DEPTH`.
const HANDLE_HALF_X: f64 = 0.12;
const HANDLE_HALF_Y: f64 = 0.025;
const HANDLE_DEPTH: f64 = 0.05;
const PLANE_HALF: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub plane_spacing: f64,
    pub handle_spacing: f64,
    /// Extra pixels the simulated segmenter bleeds past the handle silhouette.
    pub dilation: u32,
    pub with_depth: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            width: 160,
            height: 120,
            focal: 140.0,
            plane_spacing: 0.02,
            handle_spacing: 0.01,
            dilation: 2,
            with_depth: false,
            seed: 7,
        }
    }
}

pub struct SynthScene {
    pub bundle: SceneBundle,
    pub ground_truth: Mask3D,
    /// Ids of frames aimed at the handle.
    pub handle_frames: Vec<String>,
    pub oracle: SyntheticOracle,
}

/// Every tenth frame at offsets 0, 3 and 7 looks at the handle.
pub fn is_handle_view(i: usize) -> bool {
    matches!(i % 10, 0 | 3 | 7)
}

pub fn frame_id(i: usize) -> String {
    format!("frame_{i:03}")
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// World-to-camera pose looking from `eye` at `target` (x right, y down, z forward).
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> ([[f64; 3]; 3], [f64; 3]) {
    let z = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
    let x = normalize(cross([0.0, -1.0, 0.0], z));
    let y = cross(z, x);
    let r = [x, y, z];
    let t = [0, 1, 2].map(|i| -(r[i][0] * eye[0] + r[i][1] * eye[1] + r[i][2] * eye[2]));
    (r, t)
}

fn build_cloud(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<[f32; 3]>, Vec<bool>) {
    let mut pts = Vec::new();
    let mut handle = Vec::new();
    let jitter = cfg.plane_spacing * 0.1;
    let steps = (2.0 * PLANE_HALF / cfg.plane_spacing).round() as i64;
    for iy in 0..=steps {
        for ix in 0..=steps {
            let x = -PLANE_HALF + ix as f64 * cfg.plane_spacing + rng.gen_range(-jitter..jitter);
            let y = -PLANE_HALF + iy as f64 * cfg.plane_spacing + rng.gen_range(-jitter..jitter);
            if x.abs() <= HANDLE_HALF_X && y.abs() <= HANDLE_HALF_Y {
                continue;
            }
            // Distractor panel: a slight 1 cm relief in one quadrant.
            let z = if x > 0.25 && y < -0.25 { -0.01 } else { 0.0 };
            pts.push([x, y, z]);
            handle.push(false);
        }
    }
    let s = cfg.handle_spacing;
    let grid = |lo: f64, hi: f64| {
        let n = ((hi - lo) / s).round() as i64;
        (0..=n).map(move |i| lo + (hi - lo) * i as f64 / n as f64)
    };
    let mut push_handle = |p: [f64; 3], pts: &mut Vec<[f64; 3]>| {
        pts.push(p);
        handle.push(true);
    };
    let z_front = -HANDLE_DEPTH;
    for y in grid(-HANDLE_HALF_Y, HANDLE_HALF_Y) {
        for x in grid(-HANDLE_HALF_X, HANDLE_HALF_X) {
            push_handle([x, y, z_front], &mut pts);
        }
    }
    // Side walls, excluding the front edge already sampled and the row on the plane.
    let walls: Vec<f64> = grid(z_front, 0.0).skip(1).filter(|z| *z < -0.5 * s).collect();
    for &z in &walls {
        for x in grid(-HANDLE_HALF_X, HANDLE_HALF_X) {
            push_handle([x, HANDLE_HALF_Y, z], &mut pts);
            push_handle([x, -HANDLE_HALF_Y, z], &mut pts);
        }
        let ys: Vec<f64> = grid(-HANDLE_HALF_Y, HANDLE_HALF_Y).collect();
        // End caps; their top and bottom edges belong to the long walls.
        for &y in &ys[1..ys.len() - 1] {
            push_handle([HANDLE_HALF_X, y, z], &mut pts);
            push_handle([-HANDLE_HALF_X, y, z], &mut pts);
        }
    }
    let pts = pts.into_iter().map(|p| p.map(|v| v as f32)).collect();
    (pts, handle)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn mix(parts: &[(f64, &[f64])]) -> EmbeddingVector {
    let mut v = vec![0.0; EMBEDDING_DIM];
    for (w, p) in parts {
        for (o, x) in v.iter_mut().zip(p.iter()) {
            *o += w * x;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    EmbeddingVector::new(v.into_iter().map(|x| (x / n) as f32).collect()).expect("finite unit vector")
}

struct Render {
    /// Per pixel: nearest depth (0 when empty) and whether that point is on the handle.
    depth: Vec<f32>,
    top_is_handle: Vec<bool>,
}

fn render(frame: &CameraFrame, cloud: &PointCloud, handle: &[bool]) -> Render {
    let n = (frame.width * frame.height) as usize;
    let mut depth = vec![f64::INFINITY; n];
    let mut top = vec![false; n];
    for i in 0..cloud.len() {
        let proj = project_point(&cloud.point(i), frame);
        if let (Some((c, r)), Projection::Visible { z, .. }) = (proj.pixel(frame), proj) {
            let slot = (r * frame.width + c) as usize;
            if z < depth[slot] {
                depth[slot] = z;
                top[slot] = handle[i];
            }
        }
    }
    Render {
        depth: depth.into_iter().map(|d| if d.is_finite() { d as f32 } else { 0.0 }).collect(),
        top_is_handle: top,
    }
}

fn dilate(bits: &[bool], width: u32, height: u32, r: u32) -> Vec<bool> {
    let (w, h, r) = (width as i64, height as i64, r as i64);
    let mut out = vec![false; bits.len()];
    for y in 0..h {
        for x in 0..w {
            if !bits[(y * w + x) as usize] {
                continue;
            }
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    out[(yy * w + xx) as usize] = true;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct FrameTruth {
    index: usize,
    width: u32,
    height: u32,
    /// Pixel of the handle's front-face center when it is in view and unoccluded.
    center: Option<[i64; 2]>,
    decoy: Option<[i64; 2]>,
    /// Handle silhouette grown by one pixel (the verifier's notion of "on the handle").
    on_handle: Vec<bool>,
    /// What the simulated segmenter returns for a prompt on the handle.
    segment: Vec<bool>,
}

/// Answers bridge requests from scene geometry. Frames cycle through three proposal
/// behaviors (`index % 3`): handle plus a decoy on the plane, handle only, or nothing,
/// which exercises reverse validation and the fallback path.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    task: String,
    frames: HashMap<String, FrameTruth>,
}

impl SyntheticOracle {
    fn pixel(frame: &CameraFrame, p: [f64; 3]) -> Option<[i64; 2]> {
        project_point(&p, frame).pixel(frame).map(|(c, r)| [c as i64, r as i64])
    }

    fn new(bundle: &SceneBundle, handle: &[bool], dilation: u32) -> Self {
        let mut frames = HashMap::new();
        for (index, f) in bundle.frames.iter().enumerate() {
            let ren = render(f, &bundle.cloud, handle);
            let on_handle = dilate(&ren.top_is_handle, f.width, f.height, 1);
            let segment = dilate(&ren.top_is_handle, f.width, f.height, dilation);
            let center = Self::pixel(f, [0.0, 0.0, -HANDLE_DEPTH])
                .filter(|c| on_handle[(c[1] * f.width as i64 + c[0]) as usize]);
            let decoy = Self::pixel(f, [0.25, -0.05, 0.0])
                .or(Some([f.width as i64 / 2, f.height as i64 / 2]))
                .filter(|c| !on_handle[(c[1] * f.width as i64 + c[0]) as usize]);
            frames.insert(
                f.id.clone(),
                FrameTruth { index, width: f.width, height: f.height, center, decoy, on_handle, segment },
            );
        }
        Self { task: bundle.task.text().to_string(), frames }
    }

    fn frame(&self, req: &BridgeRequest) -> Result<&FrameTruth, String> {
        let id = req.frame_id.as_deref().ok_or("missing frame_id")?;
        self.frames.get(id).ok_or_else(|| format!("unknown frame {id}"))
    }

    fn answer(&self, req: &BridgeRequest) -> Result<BridgeResponse, String> {
        let on = |t: &FrameTruth, p: [i64; 2]| {
            p[0] >= 0
                && p[1] >= 0
                && p[0] < t.width as i64
                && p[1] < t.height as i64
                && t.on_handle[(p[1] * t.width as i64 + p[0]) as usize]
        };
        match req.op {
            BridgeOp::ExtractConcepts => {
                let mut r = BridgeResponse::new(BridgeOp::ExtractConcepts);
                r.concepts = Some(vec![CONCEPT.to_string()]);
                Ok(r)
            }
            BridgeOp::ProposePoints => {
                if req.task.as_deref() != Some(self.task.as_str()) {
                    return Err("unexpected task text".into());
                }
                let t = self.frame(req)?;
                let pts = match (t.center, t.index % 3) {
                    (Some(c), 0) => std::iter::once(c).chain(t.decoy).collect(),
                    (Some(c), 1) => vec![c],
                    (None, 0) => t.decoy.into_iter().collect(),
                    _ => Vec::new(),
                };
                Ok(BridgeResponse::with_points(BridgeOp::ProposePoints, pts))
            }
            BridgeOp::VerifyPoint => {
                let t = self.frame(req)?;
                let p = req.point.ok_or("missing point")?;
                Ok(BridgeResponse::verdict(on(t, p)))
            }
            BridgeOp::FallbackPoints => {
                let t = self.frame(req)?;
                let pts = match (req.concept.as_deref(), t.center) {
                    (Some(CONCEPT), Some(c)) => vec![c],
                    _ => Vec::new(),
                };
                Ok(BridgeResponse::with_points(BridgeOp::FallbackPoints, pts))
            }
            BridgeOp::SegmentAtPoints => {
                let t = self.frame(req)?;
                let prompts = req.points.as_ref().ok_or("missing points")?;
                let bits = if prompts.iter().any(|&p| on(t, p)) {
                    t.segment.clone()
                } else {
                    let mut seed = vec![false; t.on_handle.len()];
                    for p in prompts {
                        if p[0] >= 0 && p[1] >= 0 && p[0] < t.width as i64 && p[1] < t.height as i64 {
                            seed[(p[1] * t.width as i64 + p[0]) as usize] = true;
                        }
                    }
                    dilate(&seed, t.width, t.height, 3)
                };
                let mut r = BridgeResponse::new(BridgeOp::SegmentAtPoints);
                r.mask = Some(RleMask::encode(t.width, t.height, &bits));
                Ok(r)
            }
        }
    }
}

impl VlmClient for SyntheticOracle {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        Ok(self.answer(req).unwrap_or_else(|msg| BridgeResponse::error(req.op, msg)))
    }
}

pub fn generate(cfg: &SynthConfig) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (points, handle) = build_cloud(cfg, &mut rng);
    let cloud = PointCloud::new("synthetic", points, None).expect("finite synthetic cloud");

    let handle_dir = random_unit(&mut rng);
    let task_dir = random_unit(&mut rng);
    let k = [[cfg.focal, 0.0, cfg.width as f64 / 2.0], [0.0, cfg.focal, cfg.height as f64 / 2.0], [0.0, 0.0, 1.0]];
    let corners = [[0.42, 0.42], [-0.42, 0.42], [0.42, -0.42], [-0.42, -0.42]];
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut embeddings = EmbeddingTable::new();
    let mut handle_frames = Vec::new();
    for i in 0..cfg.frames {
        let id = frame_id(i);
        let (eye, target) = if is_handle_view(i) {
            let dir = normalize([rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35), -1.0]);
            let target = [0.0, 0.0, -HANDLE_DEPTH / 2.0];
            ([0, 1, 2].map(|a| target[a] + 0.8 * dir[a]), target)
        } else {
            let c = corners[i % 4];
            let dir = normalize([rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), -1.0]);
            let target = [c[0], c[1], 0.0];
            ([0, 1, 2].map(|a| target[a] + 0.45 * dir[a]), target)
        };
        let (rotation, translation) = look_at(eye, target);
        let noise = random_unit(&mut rng);
        let emb = if is_handle_view(i) {
            handle_frames.push(id.clone());
            mix(&[(0.7, &handle_dir), (0.3, &task_dir), (0.4, &noise)])
        } else {
            mix(&[(0.1, &handle_dir), (0.3, &task_dir), (0.9, &noise)])
        };
        embeddings.insert(frame_record_name(&id), emb);
        frames.push(CameraFrame {
            id: id.clone(),
            intrinsics: k,
            rotation,
            translation,
            width: cfg.width,
            height: cfg.height,
            image_path: format!("images/{id}.png"),
            depth_path: None,
            depth: None,
        });
    }
    embeddings.insert(TASK_RECORD, mix(&[(0.6, &handle_dir), (0.8, &task_dir)]));
    embeddings.insert(concept_record_name(CONCEPT), mix(&[(1.0, &handle_dir)]));

    if cfg.with_depth {
        for f in frames.iter_mut() {
            let ren = render(f, &cloud, &handle);
            f.depth = Some(DepthMap::new(f.width, f.height, ren.depth).expect("depth size matches"));
            f.depth_path = Some(format!("depth/{}.f32", f.id));
        }
    }

    let ground_truth = Mask3D::new(handle.clone(), None).expect("flag mask");
    let bundle = SceneBundle {
        root: Default::default(),
        cloud,
        frames,
        task: TaskInstruction::new(TASK_TEXT).expect("non-empty task"),
        ground_truth_mask: Some(GROUND_TRUTH_FILE.to_string()),
        embeddings,
    };
    let oracle = SyntheticOracle::new(&bundle, &handle, cfg.dilation);
    SynthScene { bundle, ground_truth, handle_frames, oracle }
}

/// Runs concept extraction, the double check and segmentation against the oracle on
/// every frame, recording each exchange.
pub fn record_transcript(scene: &SynthScene) -> Vec<TranscriptEntry> {
    let rec = RecordingClient::new(&scene.oracle);
    let concepts = extract_concepts(&rec, &scene.bundle.task).expect("oracle names a concept");
    for f in &scene.bundle.frames {
        let pts = double_check(&rec, f, &scene.bundle.task, &concepts, VerifyMode::Strict).expect("oracle answers");
        if !pts.is_empty() {
            segment_at_points(&rec, f, &pts).expect("oracle segments");
        }
    }
    rec.entries()
}

/// Writes the bundle, its ground truth and a full oracle transcript into `dir`.
pub fn write_fixture(scene: &SynthScene, dir: &Path) -> Result<(), SceneError> {
    write_scene_bundle(&scene.bundle, dir)?;
    write_mask(&scene.ground_truth, &dir.join(GROUND_TRUTH_FILE))?;
    let path = dir.join(TRANSCRIPT_FILE);
    write_transcript(&record_transcript(scene), &path).map_err(|source| SceneError::Io { path, source })
}
