//! In-process mock federation with outage, revocation and key-rotation
//! injection. The same state backs the HTTP server in [`super::http`].

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_entity_statement, EndpointCert, EntityFetcher, FetchError, StatementFields, StatusBody,
    StatusRequest, StatusResponse, StatusTransport, TransportFailure, TrustMark, TrustMarkClaims,
};
pub use super::TrustBundle;
use crate::digest::canonical_json;
use crate::keys::Jwk;

pub const DEFAULT_ISSUED_AT: u64 = 1_750_000_000;
pub const DEFAULT_STATEMENT_LIFETIME_S: u64 = 365 * 24 * 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Anchor,
    Intermediate,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyEntity {
    pub id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authority: Option<String>,
    #[serde(default)]
    pub marks: Vec<String>,
}

/// Topology config file contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationTopology {
    pub entities: Vec<TopologyEntity>,
    #[serde(default = "default_issued_at")]
    pub issued_at: u64,
    #[serde(default = "default_lifetime")]
    pub statement_lifetime_s: u64,
}

fn default_issued_at() -> u64 {
    DEFAULT_ISSUED_AT
}

fn default_lifetime() -> u64 {
    DEFAULT_STATEMENT_LIFETIME_S
}

pub const ANCHOR_ID: &str = "https://trust-anchor.example";
pub const INTERMEDIATE_ID: &str = "https://intermediate.example";
pub const QEAA_PROVIDER_ID: &str = "https://qeaa-provider.example";
pub const WALLET_PROVIDER_ID: &str = "https://wallet-provider.example";
pub const QEAA_MARK_TYPE: &str = "qeaa-provider";

impl FederationTopology {
    /// Anchor, one intermediate, a QEAA provider under the intermediate and a
    /// wallet provider under the anchor. Each non-anchor holds one mark.
    pub fn default_four() -> Self {
        Self {
            entities: vec![
                TopologyEntity {
                    id: ANCHOR_ID.into(),
                    role: Role::Anchor,
                    authority: None,
                    marks: vec![],
                },
                TopologyEntity {
                    id: INTERMEDIATE_ID.into(),
                    role: Role::Intermediate,
                    authority: Some(ANCHOR_ID.into()),
                    marks: vec!["accredited-intermediate".into()],
                },
                TopologyEntity {
                    id: QEAA_PROVIDER_ID.into(),
                    role: Role::Provider,
                    authority: Some(INTERMEDIATE_ID.into()),
                    marks: vec![QEAA_MARK_TYPE.into()],
                },
                TopologyEntity {
                    id: WALLET_PROVIDER_ID.into(),
                    role: Role::Provider,
                    authority: Some(ANCHOR_ID.into()),
                    marks: vec!["wallet-provider".into()],
                },
            ],
            issued_at: DEFAULT_ISSUED_AT,
            statement_lifetime_s: DEFAULT_STATEMENT_LIFETIME_S,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, MockError> {
        serde_json::from_slice(bytes).map_err(|e| MockError::InvalidTopology(e.to_string()))
    }

    pub fn validate(&self) -> Result<&TopologyEntity, MockError> {
        let anchors: Vec<_> = self.entities.iter().filter(|e| e.role == Role::Anchor).collect();
        let [anchor] = anchors.as_slice() else {
            return Err(MockError::InvalidTopology(format!(
                "expected exactly one anchor, found {}",
                anchors.len()
            )));
        };
        if anchor.authority.is_some() {
            return Err(MockError::InvalidTopology("anchor cannot have an authority".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entities {
            if !ids.insert(e.id.as_str()) {
                return Err(MockError::InvalidTopology(format!("duplicate entity {}", e.id)));
            }
        }
        for e in &self.entities {
            match (&e.role, &e.authority) {
                (Role::Anchor, _) => {}
                (_, None) => {
                    return Err(MockError::InvalidTopology(format!("{} has no authority", e.id)))
                }
                (_, Some(a)) if !ids.contains(a.as_str()) => {
                    return Err(MockError::InvalidTopology(format!("{} names unknown authority {a}", e.id)))
                }
                _ => {}
            }
        }
        Ok(anchor)
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum MockError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown trust mark {0}")]
    UnknownMark(String),
}

pub fn mark_id(entity_id: &str, mark_type: &str) -> String {
    format!("{entity_id}#{mark_type}")
}

pub fn status_endpoint(entity_id: &str) -> String {
    format!("{entity_id}/status")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkMode {
    Active,
    Revoked,
    Silent,
}

#[derive(Debug, Clone)]
struct EntityState {
    spec: TopologyEntity,
    key: Jwk,
    rotations: u32,
    cert: EndpointCert,
    presented_cert: EndpointCert,
    outage: bool,
    expired: bool,
    corrupt_signature: bool,
    latency: Duration,
}

#[derive(Debug, Clone)]
struct MarkState {
    holder: String,
    mark_type: String,
    mode: MarkMode,
}

#[derive(Debug)]
struct State {
    entities: BTreeMap<String, EntityState>,
    marks: BTreeMap<String, MarkState>,
    anchor_id: String,
    issued_at: u64,
    lifetime: u64,
    rng: ChaCha20Rng,
}


/// Shared handle to a running mock federation. Mutations serialize behind a
/// write lock; readers see either the state before or after a mutation.
#[derive(Debug, Clone)]
pub struct FederationHandle {
    state: Arc<RwLock<State>>,
    topology: Arc<FederationTopology>,
}

fn label(entity_id: &str) -> &str {
    let host = entity_id.split("://").nth(1).unwrap_or(entity_id);
    host.split(['.', '/', ':']).next().unwrap_or(host)
}

pub fn serve_mock_federation(
    topology: &FederationTopology,
    rng_seed: u64,
) -> Result<FederationHandle, MockError> {
    let anchor = topology.validate()?.id.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut entities = BTreeMap::new();
    let mut marks = BTreeMap::new();
    for e in &topology.entities {
        let key = Jwk::es256(format!("{}-k0", label(&e.id)), &mut rng);
        let tls_key = Jwk::es256(format!("{}-tls", label(&e.id)), &mut rng);
        let cert = EndpointCert {
            entity_id: e.id.clone(),
            public_key: tls_key.to_public(),
            not_before: topology.issued_at,
            not_after: topology.issued_at + topology.statement_lifetime_s,
        };
        for t in &e.marks {
            marks.insert(
                mark_id(&e.id, t),
                MarkState {
                    holder: e.id.clone(),
                    mark_type: t.clone(),
                    mode: MarkMode::Active,
                },
            );
        }
        entities.insert(
            e.id.clone(),
            EntityState {
                spec: e.clone(),
                key,
                rotations: 0,
                presented_cert: cert.clone(),
                cert,
                outage: false,
                expired: false,
                corrupt_signature: false,
                latency: Duration::ZERO,
            },
        );
    }
    Ok(FederationHandle {
        state: Arc::new(RwLock::new(State {
            entities,
            marks,
            anchor_id: anchor,
            issued_at: topology.issued_at,
            lifetime: topology.statement_lifetime_s,
            rng,
        })),
        topology: Arc::new(topology.clone()),
    })
}

impl State {
    fn entity(&self, id: &str) -> Result<&EntityState, MockError> {
        self.entities
            .get(id)
            .ok_or_else(|| MockError::UnknownEntity(id.to_string()))
    }

    fn entity_mut(&mut self, id: &str) -> Result<&mut EntityState, MockError> {
        self.entities
            .get_mut(id)
            .ok_or_else(|| MockError::UnknownEntity(id.to_string()))
    }

    fn validity(&self, e: &EntityState) -> (u64, u64) {
        if e.expired {
            (
                self.issued_at.saturating_sub(2 * self.lifetime),
                self.issued_at.saturating_sub(self.lifetime).max(1),
            )
        } else {
            (self.issued_at, self.issued_at + self.lifetime)
        }
    }

    fn trust_mark(&self, mark_id: &str) -> Result<TrustMark, MockError> {
        let m = self.marks.get(mark_id).ok_or_else(|| MockError::UnknownMark(mark_id.to_string()))?;
        let anchor = self.entity(&self.anchor_id)?;
        TrustMark::issue(
            &anchor.key,
            TrustMarkClaims {
                id: mark_id.to_string(),
                trust_mark_type: m.mark_type.clone(),
                iss: self.anchor_id.clone(),
                sub: m.holder.clone(),
                status_endpoint: status_endpoint(&m.holder),
                iat: self.issued_at,
            },
        )
        .map_err(|e| MockError::InvalidTopology(e.to_string()))
    }

    fn configuration(&self, id: &str) -> Result<String, MockError> {
        let e = self.entity(id)?;
        let (iat, exp) = self.validity(e);
        let trust_marks = e
            .spec
            .marks
            .iter()
            .map(|t| self.trust_mark(&mark_id(id, t)))
            .collect::<Result<Vec<_>, _>>()?;
        let trust_mark_issuers = if id == self.anchor_id {
            let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for mark in self.marks.values() {
                m.insert(mark.mark_type.clone(), vec![self.anchor_id.clone()]);
            }
            m
        } else {
            BTreeMap::new()
        };
        let stmt = build_entity_statement(
            &e.key,
            StatementFields {
                issuer_id: id.to_string(),
                subject_id: id.to_string(),
                jwks: vec![e.key.clone()],
                authority_hints: e.spec.authority.iter().cloned().collect(),
                trust_marks,
                trust_mark_issuers,
                iat,
                exp,
            },
        )
        .map_err(|err| MockError::InvalidTopology(err.to_string()))?;
        let raw = stmt.compact().to_string();
        Ok(if e.corrupt_signature { corrupt_last_signature_bit(&raw) } else { raw })
    }

    fn subordinate(&self, issuer: &str, subject: &str) -> Result<String, MockError> {
        let sup = self.entity(issuer)?;
        let sub = self.entity(subject)?;
        if sub.spec.authority.as_deref() != Some(issuer) {
            return Err(MockError::UnknownEntity(format!("{issuer} has no subordinate {subject}")));
        }
        let stmt = build_entity_statement(
            &sup.key,
            StatementFields {
                issuer_id: issuer.to_string(),
                subject_id: subject.to_string(),
                jwks: vec![sub.key.clone()],
                iat: self.issued_at,
                exp: self.issued_at + self.lifetime,
                ..Default::default()
            },
        )
        .map_err(|err| MockError::InvalidTopology(err.to_string()))?;
        Ok(stmt.compact().to_string())
    }

    fn status(&self, endpoint: &str, body: &[u8]) -> Result<StatusResponse, TransportFailure> {
        let e = self
            .entities
            .values()
            .find(|e| status_endpoint(&e.spec.id) == endpoint)
            .ok_or(TransportFailure::ConnectionRefused)?;
        if e.outage {
            return Err(TransportFailure::ConnectionRefused);
        }
        let req: Option<StatusRequest> = serde_json::from_slice(body).ok();
        let mode = req
            .and_then(|r| self.marks.get(&r.trust_mark_id))
            .filter(|m| m.holder == e.spec.id)
            .map(|m| m.mode)
            .unwrap_or(MarkMode::Revoked);
        let body = match mode {
            MarkMode::Active => canonical_json(&StatusBody { active: true }),
            MarkMode::Revoked => canonical_json(&StatusBody { active: false }),
            MarkMode::Silent => Vec::new(),
        };
        Ok(StatusResponse {
            body,
            cert: e.presented_cert.clone(),
            latency: e.latency,
        })
    }
}

fn corrupt_last_signature_bit(raw: &str) -> String {
    let (signing_input, sig) = raw.rsplit_once('.').expect("compact token");
    let mut bytes = URL_SAFE_NO_PAD.decode(sig).expect("base64url signature");
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(bytes))
}

impl FederationHandle {
    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().expect("federation lock poisoned")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, State> {
        self.state.write().expect("federation lock poisoned")
    }

    pub fn topology(&self) -> &FederationTopology {
        &self.topology
    }

    pub fn anchor_id(&self) -> String {
        self.read().anchor_id.clone()
    }

    /// Resolve a full entity id or its short host label (`qeaa-provider`).
    pub fn entity_id(&self, name: &str) -> Result<String, MockError> {
        let s = self.read();
        if s.entities.contains_key(name) {
            return Ok(name.to_string());
        }
        s.entities
            .keys()
            .find(|id| label(id) == name)
            .cloned()
            .ok_or_else(|| MockError::UnknownEntity(name.to_string()))
    }

    pub fn entity_ids(&self) -> Vec<String> {
        self.read().entities.keys().cloned().collect()
    }

    /// The entity's current signing key, private half included. Issuers use
    /// this to sign credentials.
    pub fn entity_key(&self, entity_id: &str) -> Result<Jwk, MockError> {
        Ok(self.read().entity(entity_id)?.key.clone())
    }

    pub fn anchor_key(&self) -> Jwk {
        let s = self.read();
        s.entities[&s.anchor_id].key.to_public()
    }

    pub fn endpoint_cert(&self, entity_id: &str) -> Result<EndpointCert, MockError> {
        Ok(self.read().entity(entity_id)?.cert.clone())
    }

    pub fn trust_bundle(&self) -> TrustBundle {
        let s = self.read();
        TrustBundle {
            anchor_key: s.entities[&s.anchor_id].key.to_public(),
            pinned_certs: s
                .entities
                .values()
                .map(|e| (status_endpoint(&e.spec.id), e.cert.fingerprint()))
                .collect(),
        }
    }

    pub fn mark_ids(&self) -> Vec<String> {
        self.read().marks.keys().cloned().collect()
    }

    pub fn marks_of(&self, entity_id: &str) -> Vec<String> {
        self.read()
            .marks
            .iter()
            .filter(|(_, m)| m.holder == entity_id)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Answer a status request as the endpoint would, ignoring timeouts.
    pub fn respond_status(&self, endpoint: &str, body: &[u8]) -> Result<StatusResponse, TransportFailure> {
        self.read().status(endpoint, body)
    }

    pub fn holder_endpoint(&self, mark_id: &str) -> Option<String> {
        self.read().marks.get(mark_id).map(|m| status_endpoint(&m.holder))
    }

    pub fn inject_outage(&self, entity_id: &str) -> Result<(), MockError> {
        self.write().entity_mut(entity_id)?.outage = true;
        Ok(())
    }

    /// Clear every injected fault on the entity.
    pub fn restore(&self, entity_id: &str) -> Result<(), MockError> {
        let mut s = self.write();
        let e = s.entity_mut(entity_id)?;
        e.outage = false;
        e.expired = false;
        e.corrupt_signature = false;
        e.latency = Duration::ZERO;
        e.presented_cert = e.cert.clone();
        for m in s.marks.values_mut().filter(|m| m.holder == entity_id) {
            m.mode = MarkMode::Active;
        }
        Ok(())
    }

    pub fn set_mark_mode(&self, mark_id: &str, mode: MarkMode) -> Result<(), MockError> {
        self.write()
            .marks
            .get_mut(mark_id)
            .ok_or_else(|| MockError::UnknownMark(mark_id.to_string()))?
            .mode = mode;
        Ok(())
    }

    pub fn revoke_mark(&self, mark_id: &str) -> Result<(), MockError> {
        self.set_mark_mode(mark_id, MarkMode::Revoked)
    }

    pub fn silence_mark(&self, mark_id: &str) -> Result<(), MockError> {
        self.set_mark_mode(mark_id, MarkMode::Silent)
    }

    /// Replace the entity's signing key. Its superior's subordinate statement
    /// follows the new key, so statements signed with the old one stop
    /// verifying.
    pub fn rotate_key(&self, entity_id: &str) -> Result<Jwk, MockError> {
        let mut s = self.write();
        s.entity(entity_id)?;
        let State { entities, rng, .. } = &mut *s;
        let e = entities.get_mut(entity_id).expect("checked above");
        e.rotations += 1;
        e.key = Jwk::es256(format!("{}-k{}", label(entity_id), e.rotations), rng);
        Ok(e.key.to_public())
    }

    pub fn expire_statement(&self, entity_id: &str) -> Result<(), MockError> {
        self.write().entity_mut(entity_id)?.expired = true;
        Ok(())
    }

    pub fn corrupt_signature(&self, entity_id: &str) -> Result<(), MockError> {
        self.write().entity_mut(entity_id)?.corrupt_signature = true;
        Ok(())
    }

    pub fn set_latency(&self, entity_id: &str, latency: Duration) -> Result<(), MockError> {
        self.write().entity_mut(entity_id)?.latency = latency;
        Ok(())
    }

    /// Make two endpoints present each other's certificates.
    pub fn swap_certs(&self, a: &str, b: &str) -> Result<(), MockError> {
        let mut s = self.write();
        let ca = s.entity(a)?.presented_cert.clone();
        let cb = s.entity(b)?.presented_cert.clone();
        s.entity_mut(a)?.presented_cert = cb;
        s.entity_mut(b)?.presented_cert = ca;
        Ok(())
    }
}

impl EntityFetcher for FederationHandle {
    fn fetch_configuration(&self, entity_id: &str) -> Result<String, FetchError> {
        self.read()
            .configuration(entity_id)
            .map_err(|_| FetchError::NotFound(entity_id.to_string()))
    }

    fn fetch_subordinate(&self, issuer_id: &str, subject_id: &str) -> Result<String, FetchError> {
        self.read()
            .subordinate(issuer_id, subject_id)
            .map_err(|_| FetchError::NotFound(format!("{issuer_id} -> {subject_id}")))
    }
}

impl StatusTransport for FederationHandle {
    fn query_status(
        &self,
        endpoint: &str,
        body: &[u8],
        timeout: Duration,
    ) -> Result<StatusResponse, TransportFailure> {
        let resp = self.read().status(endpoint, body)?;
        if resp.latency > timeout {
            return Err(TransportFailure::Timeout);
        }
        Ok(resp)
    }
}

/// Counts every fetch and status query passing through it.
pub struct CountingFederation<F> {
    inner: F,
    fetches: std::sync::atomic::AtomicUsize,
    status_queries: std::sync::atomic::AtomicUsize,
}

impl<F> CountingFederation<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            fetches: Default::default(),
            status_queries: Default::default(),
        }
    }

    pub fn fetches(&self) -> usize {
        self.fetches.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn status_queries(&self) -> usize {
        self.status_queries.load(std::sync::atomic::Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.fetches() + self.status_queries()
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: EntityFetcher> EntityFetcher for CountingFederation<F> {
    fn fetch_configuration(&self, entity_id: &str) -> Result<String, FetchError> {
        self.fetches.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.fetch_configuration(entity_id)
    }

    fn fetch_subordinate(&self, issuer_id: &str, subject_id: &str) -> Result<String, FetchError> {
        self.fetches.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.fetch_subordinate(issuer_id, subject_id)
    }
}

impl<F: StatusTransport> StatusTransport for CountingFederation<F> {
    fn query_status(
        &self,
        endpoint: &str,
        body: &[u8],
        timeout: Duration,
    ) -> Result<StatusResponse, TransportFailure> {
        self.status_queries.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.query_status(endpoint, body, timeout)
    }
}
