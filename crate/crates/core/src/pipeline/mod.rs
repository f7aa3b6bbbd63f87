//! Stage orchestration: select → detect → lift → refine → eval.
//!
//! Each stage reads its inputs from the artifacts the previous stage persisted, so a
//! stage re-run from files is the same computation as a full run.

mod artifacts;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

pub use artifacts::*;
pub use config::{validate_config, ClientSpec, Diagnostic, PipelineConfig, CONFIG_SCHEMA};

use crate::bridge::{
    double_check, extract_concepts, segment_at_points, BridgeError, BridgeOp, CountingClient, FixtureClient,
    PixelMask2D, RleMask, VerifyMode, VlmClient,
};
use crate::lift::{crop_neighbors, lift_mask, merge_initial_masks, LiftError};
use crate::metrics::{evaluate, EvalReport, MetricError, ScoredMask};
use crate::net::{read_checkpoint, train, CropGeometry, NetError, RefineNet, TrainReport, TrainingExample};
use crate::scene::{
    concept_record_name, load_scene_bundle, read_mask_entries, write_mask, AffordanceConceptSet, Mask3D, SceneBundle,
    SceneError,
};
use crate::select::{rank_frames, select_top_k, SelectError, SelectionConfig};
use crate::spatial::SpatialIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Select,
    Detect,
    Lift,
    Refine,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Select, Stage::Detect, Stage::Lift, Stage::Refine, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Select => "select",
            Stage::Detect => "detect",
            Stage::Lift => "lift",
            Stage::Refine => "refine",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}; expected one of select, detect, lift, refine, eval"))
    }
}

/// Failure class, which fixes the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Client,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Client => 4,
            ErrorKind::Numeric => 5,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: impl fmt::Display, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { stage: stage.to_string(), kind, message: message.into() }
    }

    pub fn config(stage: impl fmt::Display, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorKind::Config, message)
    }

    pub fn data(stage: impl fmt::Display, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorKind::Data, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Maps a module error into the taxonomy, tagged with the stage it surfaced in.
pub trait Classify {
    fn kind(&self) -> ErrorKind;
}

impl Classify for SceneError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for SelectError {
    fn kind(&self) -> ErrorKind {
        match self {
            SelectError::InvalidConfig(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for BridgeError {
    fn kind(&self) -> ErrorKind {
        match self {
            BridgeError::NoPoints => ErrorKind::Data,
            _ => ErrorKind::Client,
        }
    }
}

impl Classify for LiftError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for NetError {
    fn kind(&self) -> ErrorKind {
        match self {
            NetError::NonFiniteLoss { .. } | NetError::NonFiniteOutput => ErrorKind::Numeric,
            NetError::InvalidConfig(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for MetricError {
    fn kind(&self) -> ErrorKind {
        match self {
            MetricError::InvalidWeights(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

pub fn at<E: Classify + fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e.kind(), e.to_string())
}

fn data_at(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |m| PipelineError::data(stage, m)
}

/// Builds the client named by a `fixture:` / `http:` spec.
pub fn build_client(spec: &str) -> Result<Box<dyn VlmClient>, PipelineError> {
    match ClientSpec::parse(spec).map_err(|e| PipelineError::config("client", e))? {
        ClientSpec::Fixture(path) => {
            let c = FixtureClient::load(Path::new(&path))
                .map_err(|e| PipelineError::new("client", ErrorKind::Client, e))?;
            Ok(Box::new(c))
        }
        #[cfg(feature = "http")]
        ClientSpec::Http(url) => Ok(Box::new(crate::bridge::HttpClient::new(url))),
        #[cfg(not(feature = "http"))]
        ClientSpec::Http(_) => Err(PipelineError::config("client", "built without HTTP support")),
    }
}

/// Applies `f` to every item on up to `workers` threads; output order follows input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn load_bundle(dir: &Path, stage: Stage) -> Result<SceneBundle, PipelineError> {
    load_scene_bundle(dir).map_err(at(stage))
}

/// Concepts for selection: the client's extraction if a client is given, otherwise the
/// concept records stored in the bundle's embeddings.
pub fn resolve_concepts(bundle: &SceneBundle, client: Option<&dyn VlmClient>) -> Result<Vec<String>, PipelineError> {
    let stage = Stage::Select;
    let concepts = match client {
        Some(c) => extract_concepts(c, &bundle.task).map_err(at(stage))?.concepts().to_vec(),
        None => {
            let stored: Vec<String> = bundle.embeddings.concepts().into_iter().map(|(n, _)| n.to_string()).collect();
            if stored.is_empty() {
                return Err(PipelineError::data(stage, "bundle has no concept embeddings and no client was given"));
            }
            stored
        }
    };
    Ok(concepts)
}

pub struct SelectOutput {
    pub record: ScoresRecord,
    pub dot_products: usize,
}

pub fn stage_select(
    bundle: &SceneBundle,
    concepts: &[String],
    cfg: &SelectionConfig,
) -> Result<SelectOutput, PipelineError> {
    let stage = Stage::Select;
    cfg.validate().map_err(at(stage))?;
    let task_emb = bundle.task_embedding().map_err(at(stage))?;
    let concept_embs = concepts
        .iter()
        .map(|c| bundle.embeddings.require(&concept_record_name(c)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(at(stage))?;
    let ranking = rank_frames(bundle, task_emb, &concept_embs, cfg).map_err(at(stage))?;
    let selected = select_top_k(&ranking.scores, cfg.top_k);
    let frames = ranking.scores.into_iter().enumerate().map(|(i, score)| RankedFrame { score, rank: i + 1 }).collect();
    Ok(SelectOutput {
        record: ScoresRecord { alpha_a: cfg.alpha_a, top_k: cfg.top_k, concepts: concepts.to_vec(), frames, selected },
        dot_products: ranking.dot_products,
    })
}

pub fn mask_file_name(frame_id: &str) -> String {
    format!("{frame_id}.json")
}

pub struct DetectOutput {
    pub record: PointsRecord,
    pub masks: Vec<PixelMask2D>,
}

/// Double check and segmentation on every selected frame. `client` should be the
/// caller's counting wrapper when call totals are wanted.
pub fn stage_detect(
    bundle: &SceneBundle,
    scores: &ScoresRecord,
    client: &dyn VlmClient,
    mode: VerifyMode,
    workers: usize,
) -> Result<DetectOutput, PipelineError> {
    let stage = Stage::Detect;
    let concepts = AffordanceConceptSet::from_raw(scores.concepts.iter().cloned()).map_err(at(stage))?;
    let frames = scores
        .selected
        .iter()
        .map(|id| {
            bundle
                .frame(id)
                .ok_or_else(|| PipelineError::data(stage, format!("selected frame {id} is not in the bundle")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let counter = CountingClient::new(client);
    let results = parallel_map(&frames, workers, |frame| -> Result<_, BridgeError> {
        let points = double_check(&counter, frame, &bundle.task, &concepts, mode)?;
        let mask = if points.is_empty() { None } else { Some(segment_at_points(&counter, frame, &points)?) };
        Ok((points, mask))
    });
    let mut record_frames = Vec::with_capacity(frames.len());
    let mut masks = Vec::new();
    for (frame, res) in frames.iter().zip(results) {
        let (points, mask) = res.map_err(at(stage))?;
        record_frames.push(FramePoints {
            frame_id: frame.id.clone(),
            points,
            mask: mask.as_ref().map(|_| mask_file_name(&frame.id)),
        });
        masks.extend(mask);
    }
    Ok(DetectOutput {
        record: PointsRecord {
            task: bundle.task.text().to_string(),
            concepts: scores.concepts.clone(),
            verify_mode: mode,
            frames: record_frames,
            client_calls: counter.counts(),
        },
        masks,
    })
}

pub fn write_masks(masks: &[PixelMask2D], dir: &Path) -> Result<(), String> {
    for m in masks {
        let rle = m.to_rle();
        let rec = MaskRecord { frame_id: m.frame_id.clone(), width: rle.width, height: rle.height, counts: rle.counts };
        write_json(&rec, &dir.join(mask_file_name(&m.frame_id)))?;
    }
    Ok(())
}

pub fn read_mask_record(path: &Path) -> Result<PixelMask2D, String> {
    let rec: MaskRecord = read_json(path)?;
    let rle = RleMask { width: rec.width, height: rec.height, counts: rec.counts };
    PixelMask2D::from_rle(rec.frame_id, &rle).map_err(|e| format!("{}: {e}", path.display()))
}

pub struct LiftParams {
    pub depth_tol: f64,
    pub n_crop: usize,
    pub min_votes: usize,
}

impl From<&PipelineConfig> for LiftParams {
    fn from(c: &PipelineConfig) -> Self {
        Self { depth_tol: c.depth_tol, n_crop: c.n_crop, min_votes: c.min_votes }
    }
}

/// Lifts every recorded mask, merges by vote and grows the crop.
pub fn stage_lift(
    bundle: &SceneBundle,
    points: &PointsRecord,
    masks_dir: &Path,
    params: &LiftParams,
    workers: usize,
) -> Result<CropRecord, PipelineError> {
    let stage = Stage::Lift;
    if !(params.depth_tol.is_finite() && params.depth_tol > 0.0) {
        return Err(PipelineError::config(stage, format!("depth_tol {} must be > 0", params.depth_tol)));
    }
    let jobs: Vec<(&str, PathBuf)> = points
        .frames
        .iter()
        .filter_map(|f| f.mask.as_ref().map(|m| (f.frame_id.as_str(), masks_dir.join(m))))
        .collect();
    let lifted = parallel_map(&jobs, workers, |(id, path)| -> Result<Vec<usize>, PipelineError> {
        let frame =
            bundle.frame(id).ok_or_else(|| PipelineError::data(stage, format!("frame {id} is not in the bundle")))?;
        let mask = read_mask_record(path).map_err(data_at(stage))?;
        if mask.frame_id != frame.id {
            return Err(PipelineError::data(
                stage,
                format!("{} holds a mask for frame {}", path.display(), mask.frame_id),
            ));
        }
        lift_mask(&mask, frame, &bundle.cloud, params.depth_tol).map_err(at(stage))
    });
    let lifted = lifted.into_iter().collect::<Result<Vec<_>, _>>()?;
    let m_init = merge_initial_masks(&lifted, bundle.cloud.len(), params.min_votes);
    let index = SpatialIndex::build(bundle.cloud.positions());
    let crop = crop_neighbors(&bundle.cloud, &m_init, &index, params.n_crop).map_err(at(stage))?;
    Ok(CropRecord {
        cloud_id: bundle.cloud.id().to_string(),
        cloud_size: bundle.cloud.len(),
        seeds: m_init.indices(),
        indices: crop.indices,
        init_flags: crop.init_flags,
        centroid: crop.centroid,
        depth_tol: params.depth_tol,
        n_crop: params.n_crop,
        min_votes: params.min_votes,
        lifted: jobs
            .iter()
            .zip(&lifted)
            .map(|((id, _), l)| LiftedFrame { frame_id: id.to_string(), points: l.len() })
            .collect(),
    })
}

fn check_crop(bundle: &SceneBundle, crop: &CropRecord, stage: Stage) -> Result<(), PipelineError> {
    if crop.cloud_size != bundle.cloud.len() {
        return Err(PipelineError::data(
            stage,
            format!("crop was built for {} points, cloud has {}", crop.cloud_size, bundle.cloud.len()),
        ));
    }
    if crop.indices.len() != crop.init_flags.len() || crop.indices.is_empty() {
        return Err(PipelineError::data(stage, "crop indices and init flags are empty or differ in length"));
    }
    if crop.indices.windows(2).any(|w| w[0] >= w[1]) || *crop.indices.last().unwrap() >= bundle.cloud.len() {
        return Err(PipelineError::data(stage, "crop indices must be strictly ascending and inside the cloud"));
    }
    Ok(())
}

pub fn crop_geometry(
    bundle: &SceneBundle,
    crop: &CropRecord,
    net: &RefineNet,
    stage: Stage,
) -> Result<CropGeometry, PipelineError> {
    check_crop(bundle, crop, stage)?;
    CropGeometry::build(&crop.region().positions(&bundle.cloud), &crop.init_flags, net.config()).map_err(at(stage))
}

pub const MASK_THRESHOLD: f64 = 0.5;

/// Full-cloud mask: crop probabilities thresholded at 0.5, zero outside the crop.
pub fn stage_refine(bundle: &SceneBundle, crop: &CropRecord, net: &RefineNet) -> Result<Mask3D, PipelineError> {
    let stage = Stage::Refine;
    let geom = crop_geometry(bundle, crop, net, stage)?;
    let probs = net.probabilities(&geom).map_err(at(stage))?;
    let mut scores = vec![0.0; bundle.cloud.len()];
    for (&i, p) in crop.indices.iter().zip(probs) {
        scores[i] = p;
    }
    let flags = scores.iter().map(|&p| p >= MASK_THRESHOLD).collect();
    Mask3D::new(flags, Some(scores)).map_err(at(stage))
}

/// A predicted mask file as an evaluation instance.
pub fn scored_mask_from_file(path: &Path, id: impl Into<String>) -> Result<ScoredMask, PipelineError> {
    let entries = read_mask_entries(path).map_err(at(Stage::Eval))?;
    let confidence =
        if entries.is_empty() { 0.0 } else { entries.iter().map(|(_, s)| s).sum::<f64>() / entries.len() as f64 };
    Ok(ScoredMask { id: id.into(), confidence, indices: entries.into_iter().map(|(i, _)| i).collect() })
}

/// Evaluates a directory of predictions against a directory of ground truths.
/// Ground truth for task `t` is `gt/t.txt`; predictions are `pred/t.txt` or any
/// `pred/t/*.txt`.
pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<EvalReport, PipelineError> {
    let stage = Stage::Eval;
    let list = |dir: &Path| -> Result<Vec<PathBuf>, PipelineError> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| PipelineError::data(stage, format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let stem = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let is_txt = |p: &Path| p.is_file() && p.extension().is_some_and(|e| e == "txt");

    let mut ground: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for p in list(gt)?.into_iter().filter(|p| is_txt(p)) {
        let entries = read_mask_entries(&p).map_err(at(stage))?;
        ground.insert(stem(&p), entries.into_iter().map(|(i, _)| i).collect());
    }
    let mut preds: BTreeMap<String, Vec<ScoredMask>> = BTreeMap::new();
    for p in list(pred)? {
        if is_txt(&p) {
            let task = stem(&p);
            preds.entry(task.clone()).or_default().push(scored_mask_from_file(&p, task)?);
        } else if p.is_dir() {
            let task = p.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            for q in list(&p)?.into_iter().filter(|q| is_txt(q)) {
                let id = format!("{task}/{}", stem(&q));
                preds.entry(task.clone()).or_default().push(scored_mask_from_file(&q, id)?);
            }
        }
    }
    evaluate(&preds, &ground).map_err(at(stage))
}

/// Trains on `(bundle, crop)` pairs whose bundles carry ground truth.
pub fn train_on_crops(
    samples: &[(SceneBundle, CropRecord)],
    cfg: &PipelineConfig,
) -> Result<(RefineNet, TrainReport), PipelineError> {
    let stage = "train";
    let mut net = RefineNet::new(&cfg.network).map_err(|e| PipelineError::new(stage, e.kind(), e.to_string()))?;
    let mut data = Vec::with_capacity(samples.len());
    for (bundle, crop) in samples {
        let gt = bundle
            .ground_truth()
            .ok_or_else(|| PipelineError::data(stage, format!("{} has no ground truth mask", bundle.root.display())))?
            .map_err(|e| PipelineError::data(stage, e.to_string()))?;
        let geometry = crop_geometry(bundle, crop, &net, Stage::Refine)?;
        let labels = crop.indices.iter().map(|&i| if gt.flags()[i] { 1.0 } else { 0.0 }).collect();
        data.push(TrainingExample::new(geometry, labels).map_err(|e| PipelineError::data(stage, e.to_string()))?);
    }
    let report = train(&mut net, &data, &cfg.loss).map_err(|e| PipelineError::new(stage, e.kind(), e.to_string()))?;
    Ok((net, report))
}

pub struct PipelineRun<'a> {
    pub bundle: &'a Path,
    pub config: &'a PipelineConfig,
    pub model: Option<&'a Path>,
    pub client: &'a dyn VlmClient,
    pub out_dir: &'a Path,
    pub stop_after: Option<Stage>,
    pub workers: usize,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub mask: Option<Mask3D>,
    pub report: Option<EvalReport>,
    pub timing: TimingReport,
}

fn timed<T>(
    timing: &mut TimingReport,
    stage: Stage,
    f: impl FnOnce(&mut BTreeMap<String, u64>) -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    let start = Instant::now();
    let mut work = BTreeMap::new();
    let out = f(&mut work)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    log::info!(target: "tasa::stage", "stage={stage} wall_ms={wall_ms:.1} work={work:?}");
    timing.stages.push(StageTiming { stage: stage.to_string(), wall_ms, work });
    Ok(out)
}

/// Runs the stages in order, persisting each artifact under `out_dir` and feeding the
/// next stage from the persisted file.
pub fn run_pipeline(run: &PipelineRun<'_>) -> Result<PipelineOutcome, PipelineError> {
    let diags = validate_config(run.config);
    if !diags.is_empty() {
        let msg = diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(PipelineError::config("config", msg));
    }
    let out = run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| PipelineError::data("pipeline", format!("{}: {e}", out.display())))?;
    let mut timing = TimingReport::default();
    let stop = run.stop_after.unwrap_or(Stage::Eval);
    let client = CountingClient::new(run.client);
    let mut outcome = PipelineOutcome { mask: None, report: None, timing: TimingReport::default() };
    let finish = |timing: TimingReport, mut outcome: PipelineOutcome| -> Result<PipelineOutcome, PipelineError> {
        write_json(&timing, &out.join(TIMING_FILE)).map_err(|e| PipelineError::data("pipeline", e))?;
        outcome.timing = timing;
        Ok(outcome)
    };

    let bundle = timed(&mut timing, Stage::Select, |work| {
        let bundle = load_bundle(run.bundle, Stage::Select)?;
        let concepts = resolve_concepts(&bundle, Some(&client))?;
        let sel = stage_select(&bundle, &concepts, &run.config.selection())?;
        work.insert("frames".into(), bundle.frames.len() as u64);
        work.insert("dot_products".into(), sel.dot_products as u64);
        work.insert("client_calls".into(), client.total() as u64);
        write_json(&sel.record, &out.join(SCORES_FILE)).map_err(data_at(Stage::Select))?;
        Ok(bundle)
    })?;
    if stop == Stage::Select {
        return finish(timing, outcome);
    }

    timed(&mut timing, Stage::Detect, |work| {
        let scores: ScoresRecord = read_json(&out.join(SCORES_FILE)).map_err(data_at(Stage::Detect))?;
        let before = client.total();
        let det = stage_detect(&bundle, &scores, &client, run.config.verify_mode, run.workers)?;
        work.insert("frames".into(), scores.selected.len() as u64);
        work.insert("client_calls".into(), (client.total() - before) as u64);
        for op in BridgeOp::ALL {
            let n = det.record.client_calls.get(op.as_str()).copied().unwrap_or(0);
            work.insert(format!("calls.{op}"), n as u64);
        }
        write_masks(&det.masks, &out.join(MASKS_DIR)).map_err(data_at(Stage::Detect))?;
        write_json(&det.record, &out.join(POINTS_FILE)).map_err(data_at(Stage::Detect))
    })?;
    if stop == Stage::Detect {
        return finish(timing, outcome);
    }

    timed(&mut timing, Stage::Lift, |work| {
        let points: PointsRecord = read_json(&out.join(POINTS_FILE)).map_err(data_at(Stage::Lift))?;
        let crop = stage_lift(&bundle, &points, &out.join(MASKS_DIR), &LiftParams::from(run.config), run.workers)?;
        work.insert("seeds".into(), crop.seeds.len() as u64);
        work.insert("crop_points".into(), crop.indices.len() as u64);
        write_json(&crop, &out.join(CROP_FILE)).map_err(data_at(Stage::Lift))
    })?;
    if stop == Stage::Lift {
        return finish(timing, outcome);
    }

    let mask = timed(&mut timing, Stage::Refine, |work| {
        let model = run
            .model
            .ok_or_else(|| PipelineError::config(Stage::Refine, "the refine stage needs a model checkpoint"))?;
        let net = read_checkpoint(model).map_err(at(Stage::Refine))?;
        let crop: CropRecord = read_json(&out.join(CROP_FILE)).map_err(data_at(Stage::Refine))?;
        let mask = stage_refine(&bundle, &crop, &net)?;
        work.insert("flagged".into(), mask.count() as u64);
        write_mask(&mask, &out.join(MASK_FILE)).map_err(at(Stage::Refine))?;
        Ok(mask)
    })?;
    outcome.mask = Some(mask);
    if stop == Stage::Refine {
        return finish(timing, outcome);
    }

    let report = timed(&mut timing, Stage::Eval, |work| {
        let Some(gt) = bundle.ground_truth() else {
            work.insert("skipped".into(), 1);
            return Ok(None);
        };
        let gt = gt.map_err(at(Stage::Eval))?;
        let task = task_id(run.bundle);
        let pred = scored_mask_from_file(&out.join(MASK_FILE), task.clone())?;
        let report = evaluate(&BTreeMap::from([(task.clone(), vec![pred])]), &BTreeMap::from([(task, gt.indices())]))
            .map_err(at(Stage::Eval))?;
        write_json(&report, &out.join(REPORT_FILE)).map_err(data_at(Stage::Eval))?;
        Ok(Some(report))
    })?;
    outcome.report = report;
    finish(timing, outcome)
}

/// Task identifier for single-bundle runs: the bundle directory name.
pub fn task_id(bundle: &Path) -> String {
    bundle
        .canonicalize()
        .ok()
        .as_deref()
        .unwrap_or(bundle)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("task")
        .to_string()
}
