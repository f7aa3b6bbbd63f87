use std::time::Duration;

use super::protocol::{BridgeRequest, BridgeResponse};
use super::{TransportError, VlmClient};

/// Posts each request as JSON to a bridge server and parses the JSON reply.
pub struct HttpClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(300)).build();
        Self { url: url.into(), agent }
    }
}

impl VlmClient for HttpClient {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        let resp = match self.agent.post(&self.url).send_json(req) {
            Ok(r) => r,
            // Error envelopes arrive with non-2xx status; surface their message.
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                let msg = serde_json::from_str::<BridgeResponse>(&body).ok().and_then(|b| b.error).unwrap_or(body);
                return Err(TransportError(format!("HTTP {code}: {msg}")));
            }
            Err(e) => return Err(TransportError(e.to_string())),
        };
        resp.into_json::<BridgeResponse>().map_err(|e| TransportError(format!("bad response body: {e}")))
    }
}
