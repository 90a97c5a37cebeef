//! HTTP face of the mock federation and a client speaking to it.
//!
//! Routes:
//! - `GET /{entity_id}/.well-known/federation` entity configuration
//! - `GET /{issuer_id}/fetch?sub={subject_id}` subordinate statement
//! - `POST /status` with `{"trust_mark_id": ...}` answering `{"active": bool}`
//!   unsigned; the presented endpoint certificate travels in the
//!   `X-Endpoint-Cert` header
//! - `GET /admin/trust-bundle`, `POST /admin/{outage,restore,revoke,silence,rotate,expire,corrupt,swap,latency}`
//!
//! Entity ids are percent-encoded as a single path segment.

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::mock::{FederationHandle, MockError, TrustBundle};
use super::{
    EndpointCert, EntityFetcher, FetchError, StatusRequest, StatusResponse, StatusTransport,
    TransportFailure,
};
use crate::net::{self, HttpRequest, HttpResponse, HttpServer};

pub const CERT_HEADER: &str = "X-Endpoint-Cert";
pub const LATENCY_HEADER: &str = "X-Simulated-Latency-Ms";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdminCommand {
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

fn error(status: u16, code: &str, detail: impl ToString) -> HttpResponse {
    HttpResponse::json(status, &serde_json::json!({"error": code, "detail": detail.to_string()}))
}

fn mock_error(e: MockError) -> HttpResponse {
    error(404, "not_found", e)
}

fn handle(fed: &FederationHandle, req: HttpRequest) -> HttpResponse {
    let segments: Vec<&str> = req.path.trim_start_matches('/').split('/').collect();
    match (req.method.as_str(), segments.as_slice()) {
        ("GET", ["healthz"]) => HttpResponse::json(200, &serde_json::json!({"ok": true})),
        ("GET", [id, ".well-known", "federation"]) => {
            match fed.fetch_configuration(&net::decode(id)) {
                Ok(s) => HttpResponse::text(200, "application/entity-statement+jwt", s),
                Err(e) => error(404, "not_found", e),
            }
        }
        ("GET", [id, "fetch"]) => {
            let Some(sub) = req.query_param("sub") else {
                return error(400, "missing_sub", "sub query parameter required");
            };
            match fed.fetch_subordinate(&net::decode(id), sub) {
                Ok(s) => HttpResponse::text(200, "application/entity-statement+jwt", s),
                Err(e) => error(404, "not_found", e),
            }
        }
        ("POST", ["status"]) => {
            let endpoint = match req.query_param("endpoint") {
                Some(e) => e.to_string(),
                None => {
                    let Ok(r) = serde_json::from_slice::<StatusRequest>(&req.body) else {
                        return error(400, "bad_request", "expected {\"trust_mark_id\": ...}");
                    };
                    match fed.holder_endpoint(&r.trust_mark_id) {
                        Some(e) => e,
                        None => return error(404, "not_found", r.trust_mark_id),
                    }
                }
            };
            match fed.respond_status(&endpoint, &req.body) {
                Ok(resp) => {
                    let cert = URL_SAFE_NO_PAD.encode(resp.cert.to_bytes());
                    HttpResponse::text(200, "application/json", resp.body)
                        .with_header(CERT_HEADER, cert)
                        .with_header(LATENCY_HEADER, resp.latency.as_millis().to_string())
                }
                Err(_) => error(503, "unavailable", endpoint),
            }
        }
        ("GET", ["admin", "trust-bundle"]) => HttpResponse::json(200, &fed.trust_bundle()),
        ("GET", ["admin", "topology"]) => HttpResponse::json(200, fed.topology()),
        ("POST", ["admin", action]) => {
            let Ok(cmd) = serde_json::from_slice::<AdminCommand>(&req.body) else {
                return error(400, "bad_request", "expected {\"target\": ...}");
            };
            match admin(fed, action, &cmd) {
                Ok(v) => HttpResponse::json(200, &v),
                Err(e) => mock_error(e),
            }
        }
        _ => HttpResponse::not_found(),
    }
}

/// Apply one admin action. Shared by the HTTP route and the CLI.
pub fn admin(fed: &FederationHandle, action: &str, cmd: &AdminCommand) -> Result<serde_json::Value, MockError> {
    let resolve_entity = |name: &str| fed.entity_id(name);
    let resolve_mark = |name: &str| -> Result<String, MockError> {
        if fed.mark_ids().iter().any(|m| m == name) {
            return Ok(name.to_string());
        }
        // An entity name selects all of its marks' first entry.
        let id = fed.entity_id(name)?;
        fed.marks_of(&id)
            .into_iter()
            .next()
            .ok_or_else(|| MockError::UnknownMark(name.to_string()))
    };
    match action {
        "outage" => fed.inject_outage(&resolve_entity(&cmd.target)?)?,
        "restore" => fed.restore(&resolve_entity(&cmd.target)?)?,
        "revoke" => fed.revoke_mark(&resolve_mark(&cmd.target)?)?,
        "silence" => fed.silence_mark(&resolve_mark(&cmd.target)?)?,
        "expire" => fed.expire_statement(&resolve_entity(&cmd.target)?)?,
        "corrupt" => fed.corrupt_signature(&resolve_entity(&cmd.target)?)?,
        "latency" => fed.set_latency(
            &resolve_entity(&cmd.target)?,
            Duration::from_millis(cmd.latency_ms.unwrap_or(0)),
        )?,
        "swap" => {
            let other = cmd.other.as_deref().ok_or_else(|| MockError::UnknownEntity(String::new()))?;
            fed.swap_certs(&resolve_entity(&cmd.target)?, &resolve_entity(other)?)?
        }
        "rotate" => {
            let key = fed.rotate_key(&resolve_entity(&cmd.target)?)?;
            return Ok(serde_json::json!({"ok": true, "new_key": key}));
        }
        other => return Err(MockError::UnknownEntity(format!("unknown action {other}"))),
    }
    Ok(serde_json::json!({"ok": true}))
}

/// Serve a mock federation over HTTP on `bind` (use port 0 for ephemeral).
pub fn serve_http(fed: FederationHandle, bind: &str) -> std::io::Result<HttpServer> {
    HttpServer::spawn(bind, 4, Arc::new(move |req| handle(&fed, req)))
}

/// Talks to a federation over HTTP. Status queries go to the federation's
/// single `/status` route; the logical endpoint URL is passed along so the
/// right certificate is presented.
#[derive(Debug, Clone)]
pub struct HttpFederationClient {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpFederationClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: net::agent(Duration::from_secs(10)),
        }
    }

    fn get_text(&self, url: &str) -> Result<String, FetchError> {
        let mut resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        if resp.status() != 200 {
            return Err(FetchError::NotFound(url.to_string()));
        }
        resp.body_mut()
            .read_to_string()
            .map_err(|e| FetchError::Transport(e.to_string()))
    }

    pub fn trust_bundle(&self) -> Result<TrustBundle, FetchError> {
        let text = self.get_text(&format!("{}/admin/trust-bundle", self.base_url))?;
        serde_json::from_str(&text).map_err(|e| FetchError::Transport(e.to_string()))
    }

    pub fn admin(&self, action: &str, cmd: &AdminCommand) -> Result<serde_json::Value, FetchError> {
        let mut resp = self
            .agent
            .post(&format!("{}/admin/{action}", self.base_url))
            .send_json(cmd)
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        let status = resp.status();
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        if status != 200 {
            return Err(FetchError::NotFound(body.to_string()));
        }
        Ok(body)
    }
}

impl EntityFetcher for HttpFederationClient {
    fn fetch_configuration(&self, entity_id: &str) -> Result<String, FetchError> {
        self.get_text(&format!(
            "{}/{}/.well-known/federation",
            self.base_url,
            net::encode(entity_id)
        ))
    }

    fn fetch_subordinate(&self, issuer_id: &str, subject_id: &str) -> Result<String, FetchError> {
        self.get_text(&format!(
            "{}/{}/fetch?sub={}",
            self.base_url,
            net::encode(issuer_id),
            net::encode(subject_id)
        ))
    }
}

impl StatusTransport for HttpFederationClient {
    fn query_status(
        &self,
        endpoint: &str,
        body: &[u8],
        timeout: Duration,
    ) -> Result<StatusResponse, TransportFailure> {
        let agent = net::agent(timeout.max(Duration::from_millis(50)));
        let mut resp = agent
            .post(&format!("{}/status?endpoint={}", self.base_url, net::encode(endpoint)))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => TransportFailure::Timeout,
                ureq::Error::Io(_) | ureq::Error::ConnectionFailed => TransportFailure::ConnectionRefused,
                other => TransportFailure::Other(other.to_string()),
            })?;
        if resp.status() != 200 {
            return Err(TransportFailure::ConnectionRefused);
        }
        let cert = resp
            .headers()
            .get(CERT_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| URL_SAFE_NO_PAD.decode(v).ok())
            .and_then(|b| serde_json::from_slice::<EndpointCert>(&b).ok())
            .ok_or_else(|| TransportFailure::Other("endpoint presented no certificate".into()))?;
        let latency = resp
            .headers()
            .get(LATENCY_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse::<u64>().ok())
            .map(Duration::from_millis)
            .unwrap_or_default();
        let body = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| TransportFailure::Other(e.to_string()))?;
        if latency > timeout {
            return Err(TransportFailure::Timeout);
        }
        Ok(StatusResponse { body, cert, latency })
    }
}
