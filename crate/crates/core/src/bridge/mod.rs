//! Client protocol to a vision-language model and promptable segmenter, and the
//! double-check orchestration that turns raw proposals into manipulable points.
//!
//! Per selected frame: candidate points are proposed for the task, each candidate is
//! reverse-validated, and only when the proposal set is empty are fallback points
//! queried once per affordance concept. The result is the union of validated and
//! fallback points, deduplicated by exact pixel and sorted by `(x, y)`.

mod fixture;
#[cfg(feature = "http")]
mod http;
mod protocol;

pub use fixture::{write_transcript, FixtureClient, RecordingClient};
#[cfg(feature = "http")]
pub use http::HttpClient;
pub use protocol::{BridgeOp, BridgeRequest, BridgeResponse, RleMask, TranscriptEntry};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{AffordanceConceptSet, CameraFrame, SceneError, TaskInstruction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("{op} failed for frame {frame}: {message}", frame = frame_id.as_deref().unwrap_or("-"))]
    Transport { op: BridgeOp, frame_id: Option<String>, message: String },
    #[error("concept extraction returned no actionable concepts")]
    EmptyConceptResponse,
    #[error("malformed {op} response: {reason}")]
    MalformedResponse { op: BridgeOp, reason: String },
    #[error("frame {frame}: mask is {found_w}x{found_h}, frame is {width}x{height}")]
    MaskDimensionMismatch { frame: String, width: u32, height: u32, found_w: u32, found_h: u32 },
    #[error("segmentation needs at least one prompt point")]
    NoPoints,
    #[error("client setup failed: {0}")]
    Setup(String),
}

/// A vision-language model plus segmenter reachable through request/response records.
pub trait VlmClient: Send + Sync {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError>;
}

impl<C: VlmClient + ?Sized> VlmClient for &C {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        (**self).call(req)
    }
}

impl<C: VlmClient + ?Sized> VlmClient for Box<C> {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        (**self).call(req)
    }
}

/// Wraps a client and counts calls per operation.
pub struct CountingClient<C> {
    inner: C,
    counts: [AtomicUsize; 5],
}

impl<C: VlmClient> CountingClient<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, counts: Default::default() }
    }

    pub fn count(&self, op: BridgeOp) -> usize {
        self.counts[op as usize].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> usize {
        BridgeOp::ALL.iter().map(|&op| self.count(op)).sum()
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        BridgeOp::ALL.iter().map(|&op| (op.as_str().to_string(), self.count(op))).collect()
    }
}

impl<C: VlmClient> VlmClient for CountingClient<C> {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        self.counts[req.op as usize].fetch_add(1, Ordering::Relaxed);
        self.inner.call(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    ReverseValidated,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManipulablePoint2D {
    pub frame_id: String,
    pub x: u32,
    pub y: u32,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask2D {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl PixelMask2D {
    pub fn new(frame_id: impl Into<String>, width: u32, height: u32, bits: Vec<bool>) -> Result<Self, String> {
        if bits.len() != width as usize * height as usize {
            return Err(format!("{} bits for a {width}x{height} raster", bits.len()));
        }
        Ok(Self { frame_id: frame_id.into(), width, height, bits })
    }

    pub fn empty(frame: &CameraFrame) -> Self {
        Self {
            frame_id: frame.id.clone(),
            width: frame.width,
            height: frame.height,
            bits: vec![false; frame.width as usize * frame.height as usize],
        }
    }

    pub fn get(&self, col: u32, row: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, col: u32, row: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_rle(&self) -> RleMask {
        RleMask::encode(self.width, self.height, &self.bits)
    }

    pub fn from_rle(frame_id: impl Into<String>, rle: &RleMask) -> Result<Self, String> {
        Self::new(frame_id, rle.width, rle.height, rle.decode()?)
    }
}

/// What to do when reverse validation itself fails in transport.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    /// Treat the failure as a rejection.
    #[default]
    Strict,
    /// Keep the point unverified, with provenance `direct`.
    Lenient,
}

fn frame_request(op: BridgeOp, frame: &CameraFrame) -> BridgeRequest {
    let mut r = BridgeRequest::new(op);
    r.frame_id = Some(frame.id.clone());
    r.image_path = Some(frame.image_path.clone());
    r
}

fn send(client: &dyn VlmClient, req: &BridgeRequest) -> Result<BridgeResponse, BridgeError> {
    let transport = |message: String| BridgeError::Transport { op: req.op, frame_id: req.frame_id.clone(), message };
    let resp = client.call(req).map_err(|e| transport(e.0))?;
    if let Some(msg) = resp.error {
        return Err(transport(msg));
    }
    if resp.op != req.op {
        return Err(BridgeError::MalformedResponse { op: req.op, reason: format!("response op is {}", resp.op) });
    }
    Ok(resp)
}

pub fn extract_concepts(client: &dyn VlmClient, task: &TaskInstruction) -> Result<AffordanceConceptSet, BridgeError> {
    let mut req = BridgeRequest::new(BridgeOp::ExtractConcepts);
    req.task = Some(task.text().to_string());
    let resp = send(client, &req)?;
    let raw = resp
        .concepts
        .ok_or(BridgeError::MalformedResponse { op: BridgeOp::ExtractConcepts, reason: "missing concepts".into() })?;
    AffordanceConceptSet::from_raw(raw).map_err(|e| match e {
        SceneError::EmptyConceptSet => BridgeError::EmptyConceptResponse,
        other => BridgeError::MalformedResponse { op: BridgeOp::ExtractConcepts, reason: other.to_string() },
    })
}

/// In-bounds points plus the number of out-of-bounds points that were dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub points: Vec<ManipulablePoint2D>,
    pub rejected: usize,
}

fn collect_points(
    frame: &CameraFrame,
    resp: BridgeResponse,
    op: BridgeOp,
    provenance: Provenance,
    concept: Option<&str>,
) -> Result<Proposal, BridgeError> {
    let raw = resp.points.ok_or(BridgeError::MalformedResponse { op, reason: "missing points".into() })?;
    let mut points = Vec::with_capacity(raw.len());
    let mut rejected = 0;
    for [x, y] in raw {
        if frame.contains_pixel(x, y) {
            points.push(ManipulablePoint2D {
                frame_id: frame.id.clone(),
                x: x as u32,
                y: y as u32,
                provenance,
                concept: concept.map(str::to_string),
            });
        } else {
            rejected += 1;
        }
    }
    if rejected > 0 {
        log::warn!("frame {}: dropped {rejected} out-of-bounds {op} point(s)", frame.id);
    }
    Ok(Proposal { points, rejected })
}

pub fn propose_points(
    client: &dyn VlmClient,
    frame: &CameraFrame,
    task: &TaskInstruction,
) -> Result<Proposal, BridgeError> {
    let mut req = frame_request(BridgeOp::ProposePoints, frame);
    req.task = Some(task.text().to_string());
    let resp = send(client, &req)?;
    collect_points(frame, resp, BridgeOp::ProposePoints, Provenance::Direct, None)
}

pub fn fallback_points(client: &dyn VlmClient, frame: &CameraFrame, concept: &str) -> Result<Proposal, BridgeError> {
    let mut req = frame_request(BridgeOp::FallbackPoints, frame);
    req.concept = Some(concept.to_string());
    let resp = send(client, &req)?;
    collect_points(frame, resp, BridgeOp::FallbackPoints, Provenance::Fallback, Some(concept))
}

pub fn verify_point(
    client: &dyn VlmClient,
    frame: &CameraFrame,
    point: &ManipulablePoint2D,
    task: &TaskInstruction,
) -> Result<bool, BridgeError> {
    let mut req = frame_request(BridgeOp::VerifyPoint, frame);
    req.task = Some(task.text().to_string());
    req.point = Some([point.x as i64, point.y as i64]);
    let resp = send(client, &req)?;
    resp.verdict.ok_or(BridgeError::MalformedResponse { op: BridgeOp::VerifyPoint, reason: "missing verdict".into() })
}

pub fn segment_at_points(
    client: &dyn VlmClient,
    frame: &CameraFrame,
    points: &[ManipulablePoint2D],
) -> Result<PixelMask2D, BridgeError> {
    if points.is_empty() {
        return Err(BridgeError::NoPoints);
    }
    let mut req = frame_request(BridgeOp::SegmentAtPoints, frame);
    req.points = Some(points.iter().map(|p| [p.x as i64, p.y as i64]).collect());
    let resp = send(client, &req)?;
    let rle = resp
        .mask
        .ok_or(BridgeError::MalformedResponse { op: BridgeOp::SegmentAtPoints, reason: "missing mask".into() })?;
    if rle.width != frame.width || rle.height != frame.height {
        return Err(BridgeError::MaskDimensionMismatch {
            frame: frame.id.clone(),
            width: frame.width,
            height: frame.height,
            found_w: rle.width,
            found_h: rle.height,
        });
    }
    PixelMask2D::from_rle(&frame.id, &rle)
        .map_err(|reason| BridgeError::MalformedResponse { op: BridgeOp::SegmentAtPoints, reason })
}

/// Reverse validation of proposals, with a per-concept fallback query when nothing
/// was proposed. Output is deduplicated by pixel and sorted by `(x, y)`.
pub fn double_check(
    client: &dyn VlmClient,
    frame: &CameraFrame,
    task: &TaskInstruction,
    concepts: &AffordanceConceptSet,
    mode: VerifyMode,
) -> Result<Vec<ManipulablePoint2D>, BridgeError> {
    let proposal = propose_points(client, frame, task)?;
    let mut out: BTreeMap<(u32, u32), ManipulablePoint2D> = BTreeMap::new();

    for mut p in proposal.points.iter().cloned() {
        let keep = match verify_point(client, frame, &p, task) {
            Ok(true) => {
                p.provenance = Provenance::ReverseValidated;
                true
            }
            Ok(false) => false,
            Err(BridgeError::Transport { message, .. }) => {
                log::warn!("frame {}: verification of ({}, {}) failed: {message}", frame.id, p.x, p.y);
                mode == VerifyMode::Lenient
            }
            Err(other) => return Err(other),
        };
        if keep {
            out.entry((p.x, p.y)).or_insert(p);
        }
    }

    if proposal.points.is_empty() {
        for concept in concepts.concepts() {
            for q in fallback_points(client, frame, concept)?.points {
                // Lexicographically smallest concept wins so the result is order independent.
                out.entry((q.x, q.y))
                    .and_modify(|existing| {
                        if q.concept < existing.concept {
                            existing.concept = q.concept.clone();
                        }
                    })
                    .or_insert(q);
            }
        }
    }
    Ok(out.into_values().collect())
}
