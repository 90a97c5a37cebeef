//! Verification as a service: an HTTP front for attested re-issuance and
//! publication, whose own workload is measured, plus a client that will not
//! send a credential before the service has attested.
//!
//! # Service report data
//!
//! Fields in order, each as a 4-byte big-endian length then bytes:
//! service measurement (32), provider key fingerprint (32), nonce (32),
//! timestamp (8, big-endian). `report_data` is SHA-256 of that followed by
//! 32 zero bytes.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attested::{AttestedCredential, VerificationSummary};
use crate::clock::Clock;
use crate::credential::{credential_digest, SdJwtVc};
use crate::digest::{canonical_json, Digest};
use crate::enclave::{
    measure_workload, put_field, verify_quote_report, FederationContext, Platform, Quote, QuoteVerdict,
    VerificationPolicy, WorkloadDescriptor,
};
use crate::federation::{EntityFetcher, StatusTransport, TrustBundle};
use crate::keys::{b64_bytes, Jwk};
use crate::ledger::{EventFilter, EventRef, LedgerEvent, SharedChain};
use crate::net::{agent, HttpRequest, HttpResponse, HttpServer};
use crate::wallet::{EnclaveContext, SsiWallet, WalletError};

pub const SERVICE_WORKLOAD_NAME: &str = "ssibridge-verification-service";
pub const SERVICE_WORKLOAD_VERSION: &str = "1.0";
pub const SERVICE_LOGIC: &str = "accept sd-jwt-vc over http; run the credential verifier workload; \
mint the attested credential under the provider key; prove and submit to the verifier contract; \
return the attested credential and event reference; keep no credential bytes";
pub const NONCE_LEN: usize = 32;

/// The measured service pipeline.
pub fn service_workload(version: &str, policy: VerificationPolicy) -> WorkloadDescriptor {
    WorkloadDescriptor {
        name: SERVICE_WORKLOAD_NAME.into(),
        version: version.into(),
        logic_digest: Digest::of(SERVICE_LOGIC.as_bytes()),
        policy,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub provider_key: Jwk,
    pub workload: WorkloadDescriptor,
    pub expected_measurement: Digest,
    pub base_endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceAttestation {
    pub quote: Quote,
    pub provider_key_fingerprint: Digest,
    #[serde(rename = "nonce_b64", with = "b64_bytes")]
    pub nonce: Vec<u8>,
    /// Provider signature over the canonical JSON of `quote`.
    #[serde(with = "b64_bytes")]
    pub provider_signature: Vec<u8>,
}

pub fn service_report_data(measurement: &Digest, provider_fp: &Digest, nonce: &[u8], timestamp: u64) -> [u8; 64] {
    let mut enc = Vec::new();
    put_field(&mut enc, measurement.as_bytes());
    put_field(&mut enc, provider_fp.as_bytes());
    put_field(&mut enc, nonce);
    put_field(&mut enc, &timestamp.to_be_bytes());
    let mut out = [0u8; 64];
    out[..32].copy_from_slice(Digest::of(&enc).as_bytes());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum AttestationFailure {
    #[error("provider key differs from the pinned one")]
    ProviderKeyMismatch,
    #[error("provider signature invalid")]
    ProviderSignatureInvalid,
    #[error("platform root not trusted")]
    UntrustedRoot,
    #[error("measurement mismatch")]
    MeasurementMismatch,
    #[error("nonce mismatch")]
    NonceMismatch,
    #[error("quote invalid")]
    QuoteInvalid,
}

/// Client-side attestation check.
pub fn check_attestation(
    att: &ServiceAttestation,
    provider_key: &Jwk,
    expected_measurement: &Digest,
    trusted_root: &Digest,
    nonce: &[u8],
) -> Result<(), AttestationFailure> {
    if att.provider_key_fingerprint != provider_key.fingerprint() {
        return Err(AttestationFailure::ProviderKeyMismatch);
    }
    if !provider_key.verify(&canonical_json(&att.quote), &att.provider_signature) {
        return Err(AttestationFailure::ProviderSignatureInvalid);
    }
    let root = &att.quote.endorsement.root_cert;
    if root.fingerprint() != *trusted_root {
        return Err(AttestationFailure::UntrustedRoot);
    }
    if att.quote.measurement != *expected_measurement {
        return Err(AttestationFailure::MeasurementMismatch);
    }
    if att.nonce != nonce {
        return Err(AttestationFailure::NonceMismatch);
    }
    let expected = service_report_data(expected_measurement, &att.provider_key_fingerprint, nonce, att.quote.timestamp);
    match verify_quote_report(&att.quote, root, expected_measurement, &expected) {
        QuoteVerdict::Valid => Ok(()),
        QuoteVerdict::InputsMismatch => Err(AttestationFailure::NonceMismatch),
        QuoteVerdict::MeasurementMismatch => Err(AttestationFailure::MeasurementMismatch),
        _ => Err(AttestationFailure::QuoteInvalid),
    }
}

/// What a caller needs for both federation fetches and status queries.
pub trait FederationAccess: EntityFetcher + StatusTransport {}
impl<T: EntityFetcher + StatusTransport> FederationAccess for T {}

pub struct ServiceConfig {
    pub platform: Arc<Platform>,
    pub service_workload: WorkloadDescriptor,
    pub verifier_workload: WorkloadDescriptor,
    pub provider_key: Jwk,
    pub federation: Arc<dyn FederationAccess>,
    pub trust: TrustBundle,
    pub chain: SharedChain,
    pub contract: String,
    pub clock: Arc<dyn Clock>,
    pub validity_window_s: u64,
    /// Written after every publication when set.
    pub ledger_path: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub method: String,
    pub path: String,
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_digest: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub sd_jwt_vc_compact: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub attested_jwt_vc: String,
    pub event_ref: EventRef,
    pub verdict: VerificationSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct ErrorEnvelope {
    error: ErrorBody,
}

#[derive(Serialize, Deserialize)]
struct AttestRequest {
    #[serde(rename = "nonce_b64", with = "b64_bytes")]
    nonce: Vec<u8>,
}

pub struct VerificationService {
    cfg: ServiceConfig,
    base_endpoint: Mutex<String>,
    log: Mutex<Vec<RequestLogEntry>>,
}

impl VerificationService {
    pub fn new(cfg: ServiceConfig) -> Self {
        Self {
            cfg,
            base_endpoint: Mutex::new(String::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn descriptor(&self) -> ServiceDescriptor {
        ServiceDescriptor {
            provider_key: self.cfg.provider_key.to_public(),
            workload: self.cfg.service_workload.clone(),
            expected_measurement: measure_workload(&self.cfg.service_workload),
            base_endpoint: self.base_endpoint.lock().unwrap().clone(),
        }
    }

    pub fn attest(&self, nonce: &[u8]) -> ServiceAttestation {
        let measurement = measure_workload(&self.cfg.service_workload);
        let provider_fp = self.cfg.provider_key.fingerprint();
        let ts = self.cfg.clock.now();
        let quote = self
            .cfg
            .platform
            .quote(measurement, service_report_data(&measurement, &provider_fp, nonce, ts), ts);
        let provider_signature = self
            .cfg
            .provider_key
            .sign(&canonical_json(&quote))
            .expect("provider key has private material");
        ServiceAttestation {
            quote,
            provider_key_fingerprint: provider_fp,
            nonce: nonce.to_vec(),
            provider_signature,
        }
    }

    /// Run the full pipeline for one credential. Nothing about the
    /// credential outlives the call except what lands on the ledger.
    pub fn verify(&self, compact: &str) -> Result<VerifyResponse, WalletError> {
        let cred = SdJwtVc::parse(compact)?;
        let holder = cred.claims_unverified()?.sub;
        let mut wallet =
            SsiWallet::new(self.cfg.provider_key.clone(), holder).with_window(self.cfg.validity_window_s);
        let fed = &*self.cfg.federation;
        let ctx = FederationContext {
            fetcher: fed,
            transport: fed,
            trust: &self.cfg.trust,
        };
        let enclave = EnclaveContext {
            platform: &self.cfg.platform,
            workload: &self.cfg.verifier_workload,
        };
        let attested = wallet.create_attested_credential(&cred, &ctx, &enclave, &*self.cfg.clock)?;
        let event_ref = {
            let mut chain = self.cfg.chain.write().unwrap();
            let r = wallet.publish_proof(&attested, &mut chain, &self.cfg.contract)?;
            if let Some(p) = &self.cfg.ledger_path {
                chain.save(p)?;
            }
            r
        };
        Ok(VerifyResponse {
            attested_jwt_vc: attested.compact().to_string(),
            event_ref,
            verdict: attested.claims().verification_result.clone(),
        })
    }

    pub fn events(&self, credential_digest: Option<Digest>) -> Vec<LedgerEvent> {
        self.cfg.chain.read().unwrap().get_events(&EventFilter {
            credential_digest,
            ..Default::default()
        })
    }

    pub fn request_log(&self) -> Vec<RequestLogEntry> {
        self.log.lock().unwrap().clone()
    }

    /// Every byte the service keeps between requests.
    pub fn retained_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&*self.log.lock().unwrap()).unwrap_or_default();
        out.extend_from_slice(&self.cfg.chain.read().unwrap().to_jsonl());
        out.extend_from_slice(self.base_endpoint.lock().unwrap().as_bytes());
        out
    }

    pub fn handle(&self, req: HttpRequest) -> HttpResponse {
        let mut digest = None;
        let resp = match (req.method.as_str(), req.path.as_str()) {
            ("GET", "/healthz") => HttpResponse::json(200, &serde_json::json!({"ok": true})),
            ("GET", "/descriptor") => HttpResponse::json(200, &self.descriptor()),
            ("POST", "/attest") => match serde_json::from_slice::<AttestRequest>(&req.body) {
                Ok(r) if r.nonce.len() == NONCE_LEN => HttpResponse::json(200, &self.attest(&r.nonce)),
                _ => error_response(400, "BadRequest", "nonce_b64 must be 32 bytes", None),
            },
            ("POST", "/verify") => match serde_json::from_slice::<VerifyRequest>(&req.body) {
                Ok(r) => {
                    digest = Some(credential_digest(r.sd_jwt_vc_compact.as_bytes()));
                    match self.verify(&r.sd_jwt_vc_compact) {
                        Ok(v) => HttpResponse::json(200, &v),
                        Err(e) => wallet_error_response(&e),
                    }
                }
                Err(e) => error_response(400, "BadRequest", &e.to_string(), None),
            },
            ("GET", "/events") => match req.query_param("credential_digest").map(Digest::from_hex) {
                Some(Err(e)) => error_response(400, "BadRequest", &e.to_string(), None),
                Some(Ok(d)) => HttpResponse::json(200, &self.events(Some(d))),
                None => HttpResponse::json(200, &self.events(None)),
            },
            _ => HttpResponse::not_found(),
        };
        self.log.lock().unwrap().push(RequestLogEntry {
            method: req.method,
            path: req.path,
            status: resp.status,
            credential_digest: digest,
        });
        resp
    }
}

fn error_response(status: u16, code: &str, message: &str, verdict: Option<serde_json::Value>) -> HttpResponse {
    HttpResponse::json(
        status,
        &ErrorEnvelope {
            error: ErrorBody {
                code: code.into(),
                message: message.into(),
                verdict,
            },
        },
    )
}

fn wallet_error_response(e: &WalletError) -> HttpResponse {
    let verdict = match e {
        WalletError::PreflightFailed { verdict, .. } => serde_json::to_value(verdict).ok(),
        _ => None,
    };
    error_response(422, e.code(), &e.to_string(), verdict)
}

pub fn serve_service(service: Arc<VerificationService>, bind: &str) -> std::io::Result<HttpServer> {
    let s = Arc::clone(&service);
    let server = HttpServer::spawn(bind, 4, Arc::new(move |req| s.handle(req)))?;
    *service.base_endpoint.lock().unwrap() = server.base_url();
    Ok(server)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("attestation failed: {0}")]
    AttestationFailed(AttestationFailure),
    #[error("service unreachable: {0}")]
    Unreachable(String),
    #[error("service error {}: {}", .0.code, .0.message)]
    Server(ErrorBody),
}

impl ServiceError {
    pub fn code(&self) -> String {
        match self {
            ServiceError::AttestationFailed(_) => "AttestationFailed".into(),
            ServiceError::Unreachable(_) => "Unreachable".into(),
            ServiceError::Server(b) => b.code.clone(),
        }
    }
}

const CLIENT_TIMEOUT: Duration = Duration::from_secs(30);

fn get_json<T: serde::de::DeserializeOwned>(url: &str) -> Result<T, ServiceError> {
    let mut resp = agent(CLIENT_TIMEOUT)
        .get(url)
        .call()
        .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
    read_json(resp.status().as_u16(), resp.body_mut().read_to_vec())
}

fn post_json<B: Serialize, T: serde::de::DeserializeOwned>(url: &str, body: &B) -> Result<T, ServiceError> {
    let mut resp = agent(CLIENT_TIMEOUT)
        .post(url)
        .send_json(body)
        .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
    read_json(resp.status().as_u16(), resp.body_mut().read_to_vec())
}

fn read_json<T: serde::de::DeserializeOwned>(
    status: u16,
    body: Result<Vec<u8>, ureq::Error>,
) -> Result<T, ServiceError> {
    let body = body.map_err(|e| ServiceError::Unreachable(e.to_string()))?;
    if status != 200 {
        return match serde_json::from_slice::<ErrorEnvelope>(&body) {
            Ok(env) => Err(ServiceError::Server(env.error)),
            Err(_) => Err(ServiceError::Unreachable(format!("http {status}"))),
        };
    }
    serde_json::from_slice(&body).map_err(|e| ServiceError::Unreachable(e.to_string()))
}

/// Fetch the public descriptor. Its measurement is informational only; a
/// client compares against a value obtained elsewhere.
pub fn fetch_descriptor(base_url: &str) -> Result<ServiceDescriptor, ServiceError> {
    get_json(&format!("{}/descriptor", base_url.trim_end_matches('/')))
}

/// A service that has passed attestation. The only way to send it a
/// credential through this client.
#[derive(Debug, Clone)]
pub struct ServiceHandle {
    base_url: String,
    attestation: ServiceAttestation,
}

/// Challenge the service and check its answer.
pub fn attest_service(
    base_url: &str,
    provider_key: &Jwk,
    expected_measurement: &Digest,
    trusted_root: &Digest,
    nonce: &[u8; NONCE_LEN],
) -> Result<ServiceHandle, ServiceError> {
    let base_url = base_url.trim_end_matches('/').to_string();
    let att: ServiceAttestation = post_json(
        &format!("{base_url}/attest"),
        &AttestRequest { nonce: nonce.to_vec() },
    )?;
    check_attestation(&att, provider_key, expected_measurement, trusted_root, nonce)
        .map_err(ServiceError::AttestationFailed)?;
    Ok(ServiceHandle {
        base_url,
        attestation: att,
    })
}

impl ServiceHandle {
    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn attestation(&self) -> &ServiceAttestation {
        &self.attestation
    }

    pub fn request_verification(&self, cred: &SdJwtVc) -> Result<VerifyResponse, ServiceError> {
        let resp: VerifyResponse = post_json(
            &format!("{}/verify", self.base_url),
            &VerifyRequest {
                sd_jwt_vc_compact: cred.compact_form(),
            },
        )?;
        AttestedCredential::parse(&resp.attested_jwt_vc)
            .map_err(|e| ServiceError::Unreachable(format!("bad attested credential: {e}")))?;
        Ok(resp)
    }

    pub fn events(&self, credential_digest: &Digest) -> Result<Vec<LedgerEvent>, ServiceError> {
        get_json(&format!("{}/events?credential_digest={}", self.base_url, credential_digest.to_hex()))
    }
}

#[cfg(test)]
mod tests;
