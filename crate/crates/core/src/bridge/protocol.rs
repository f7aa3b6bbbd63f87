//! Wire records shared by the fixture transcript and the HTTP bridge.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeOp {
    ExtractConcepts,
    ProposePoints,
    VerifyPoint,
    FallbackPoints,
    SegmentAtPoints,
}

impl BridgeOp {
    pub const ALL: [BridgeOp; 5] = [
        BridgeOp::ExtractConcepts,
        BridgeOp::ProposePoints,
        BridgeOp::VerifyPoint,
        BridgeOp::FallbackPoints,
        BridgeOp::SegmentAtPoints,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BridgeOp::ExtractConcepts => "extract_concepts",
            BridgeOp::ProposePoints => "propose_points",
            BridgeOp::VerifyPoint => "verify_point",
            BridgeOp::FallbackPoints => "fallback_points",
            BridgeOp::SegmentAtPoints => "segment_at_points",
        }
    }
}

impl std::fmt::Display for BridgeOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub op: BridgeOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[i64; 2]>,
    /// Prompt points for `segment_at_points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[i64; 2]>>,
}

impl BridgeRequest {
    pub fn new(op: BridgeOp) -> Self {
        Self { op, task: None, concept: None, frame_id: None, image_path: None, point: None, points: None }
    }

    /// Replay key: the request without its machine-specific image path.
    pub fn replay_key(&self) -> String {
        let mut key = self.clone();
        key.image_path = None;
        serde_json::to_string(&key).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub op: BridgeOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[i64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
    /// Error envelope; a response carrying `error` is a transport failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BridgeResponse {
    pub fn new(op: BridgeOp) -> Self {
        Self { op, points: None, verdict: None, concepts: None, mask: None, error: None }
    }

    pub fn with_points(op: BridgeOp, points: Vec<[i64; 2]>) -> Self {
        Self { points: Some(points), ..Self::new(op) }
    }

    pub fn verdict(v: bool) -> Self {
        Self { verdict: Some(v), ..Self::new(BridgeOp::VerifyPoint) }
    }

    pub fn error(op: BridgeOp, message: impl Into<String>) -> Self {
        Self { error: Some(message.into()), ..Self::new(op) }
    }
}

/// One request/response pair of a recorded transcript (one JSONL line).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: BridgeRequest,
    pub response: BridgeResponse,
}

/// Run-length encoded binary raster: row-major run lengths alternating
/// unset/set, starting with an unset run (which may be zero).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(width: u32, height: u32, bits: &[bool]) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Self { width, height, counts }
    }

    pub fn decode(&self) -> Result<Vec<bool>, String> {
        let total = self.width as usize * self.height as usize;
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &c in &self.counts {
            if bits.len() + c as usize > total {
                return Err(format!("runs exceed {}x{} raster", self.width, self.height));
            }
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        if bits.len() != total {
            return Err(format!("runs cover {} of {} pixels", bits.len(), total));
        }
        Ok(bits)
    }
}
