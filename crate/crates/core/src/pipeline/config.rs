use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::VerifyMode;
use crate::lift::{DEFAULT_DEPTH_TOL, DEFAULT_N_CROP};
use crate::metrics::LossConfig;
use crate::net::NetworkConfig;
use crate::select::SelectionConfig;

pub const CONFIG_SCHEMA: u32 = 1;

/// Every tunable of a run. Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema: u32,
    pub alpha_a: f64,
    pub top_k: usize,
    pub verify_mode: VerifyMode,
    pub depth_tol: f64,
    pub n_crop: usize,
    pub min_votes: usize,
    pub loss: LossConfig,
    /// Architecture, optimizer and the run seed (`network.seed`).
    pub network: NetworkConfig,
    /// `fixture:<transcript.jsonl>` or `http:<url>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sel = SelectionConfig::default();
        Self {
            schema: CONFIG_SCHEMA,
            alpha_a: sel.alpha_a,
            top_k: sel.top_k,
            verify_mode: VerifyMode::Strict,
            depth_tol: DEFAULT_DEPTH_TOL,
            n_crop: DEFAULT_N_CROP,
            min_votes: 1,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
            client: None,
        }
    }
}

impl PipelineConfig {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig { alpha_a: self.alpha_a, top_k: self.top_k }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One violated range constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub value: String,
    pub allowed: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}: allowed {}", self.field, self.value, self.allowed)
    }
}

/// Where bridge responses come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientSpec {
    Fixture(String),
    Http(String),
}

impl ClientSpec {
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some(path) = s.strip_prefix("fixture:") {
            return if path.is_empty() {
                Err("fixture client needs a transcript path".into())
            } else {
                Ok(Self::Fixture(path.to_string()))
            };
        }
        if let Some(url) = s.strip_prefix("http:") {
            // Both `http:<url>` and a bare `http://...` are accepted.
            let url = if url.starts_with("//") { s.to_string() } else { url.to_string() };
            return if url.is_empty() { Err("http client needs a URL".into()) } else { Ok(Self::Http(url)) };
        }
        if s.starts_with("https://") {
            return Ok(Self::Http(s.to_string()));
        }
        Err(format!("client {s:?} is neither fixture:<path> nor http:<url>"))
    }
}

/// Applies every module's range checks. An empty list means the config is usable.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |field: &str, value: String, allowed: &str| {
        out.push(Diagnostic { field: field.into(), value, allowed: allowed.into() })
    };
    if cfg.schema != CONFIG_SCHEMA {
        push("schema", cfg.schema.to_string(), &format!("{CONFIG_SCHEMA}"));
    }
    if !(0.0..=1.0).contains(&cfg.alpha_a) {
        push("alpha_a", cfg.alpha_a.to_string(), "alpha_a ∈ [0, 1]");
    }
    if cfg.top_k == 0 {
        push("top_k", "0".into(), "top_k >= 1");
    }
    if !(cfg.depth_tol.is_finite() && cfg.depth_tol > 0.0) {
        push("depth_tol", cfg.depth_tol.to_string(), "depth_tol > 0 (meters)");
    }
    if cfg.n_crop == 0 {
        push("n_crop", "0".into(), "n_crop >= 1");
    }
    if cfg.min_votes == 0 {
        push("min_votes", "0".into(), "min_votes >= 1");
    }
    let w = cfg.loss.weights.as_array();
    for (name, v) in ["a1", "a2", "a3", "a4"].iter().zip(w) {
        if !(v.is_finite() && v >= 0.0) {
            push(&format!("loss.weights.{name}"), v.to_string(), "each loss weight >= 0");
        }
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > crate::metrics::LossWeights::SUM_TOLERANCE {
        push("loss.weights", format!("{w:?} (sum {sum})"), "a1 + a2 + a3 + a4 = 1 (Σα_i = 1, within 1e-9)");
    }
    if !(cfg.loss.gamma.is_finite() && cfg.loss.gamma >= 0.0) {
        push("loss.gamma", cfg.loss.gamma.to_string(), "gamma >= 0");
    }
    if !(cfg.loss.alpha_f > 0.0 && cfg.loss.alpha_f <= 1.0) {
        push("loss.alpha_f", cfg.loss.alpha_f.to_string(), "alpha_f ∈ (0, 1]");
    }
    for (field, problem) in cfg.network.problems() {
        push(&field, problem, "see network constraints");
    }
    if let Some(c) = &cfg.client {
        if let Err(e) = ClientSpec::parse(c) {
            push("client", c.clone(), &e);
        }
    }
    out
}
