use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::protocol::{BridgeRequest, BridgeResponse, TranscriptEntry};
use super::{TransportError, VlmClient};

/// Replays a recorded JSONL transcript. Immutable after load, so concurrent replay is safe.
#[derive(Debug, Clone, Default)]
pub struct FixtureClient {
    responses: HashMap<String, BridgeResponse>,
}

impl FixtureClient {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Result<Self, String> {
        let mut responses = HashMap::new();
        for e in entries {
            let key = e.request.replay_key();
            match responses.get(&key) {
                Some(prev) if prev != &e.response => {
                    return Err(format!("conflicting responses recorded for {key}"));
                }
                Some(_) => {}
                None => {
                    responses.insert(key, e.response);
                }
            }
        }
        Ok(Self { responses })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|e| format!("{} line {}: {e}", path.display(), n + 1))?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl VlmClient for FixtureClient {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        let key = req.replay_key();
        self.responses.get(&key).cloned().ok_or_else(|| TransportError(format!("no recorded response for {key}")))
    }
}

/// Forwards to `inner` and records every exchange that succeeded in transport.
pub struct RecordingClient<C> {
    inner: C,
    log: std::sync::Mutex<Vec<TranscriptEntry>>,
}

impl<C: VlmClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, log: std::sync::Mutex::new(Vec::new()) }
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.log.lock().expect("recording lock").clone()
    }
}

impl<C: VlmClient> VlmClient for RecordingClient<C> {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        let resp = self.inner.call(req)?;
        self.log.lock().expect("recording lock").push(TranscriptEntry { request: req.clone(), response: resp.clone() });
        Ok(resp)
    }
}

pub fn write_transcript(entries: &[TranscriptEntry], path: &Path) -> std::io::Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)
}
