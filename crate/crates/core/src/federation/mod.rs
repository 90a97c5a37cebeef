//! Trust federation: entity statements, trust marks, anchor-rooted chains
//! and trust-mark status checks.
//!
//! A resolved chain interleaves entity configurations with the subordinate
//! statements that vouch for them:
//!
//! ```text
//! [EC(leaf), S(sup -> leaf), EC(sup), S(anchor -> sup), EC(anchor)]
//! ```
//!
//! Every self-signed configuration is checked against the keys its superior
//! published about it; statements issued by the anchor are checked against
//! the anchor key obtained out of band, never against a fetched one.

pub mod http;
pub mod mock;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::digest::{canonical_json, canonical_json_digest, Digest};
use crate::keys::{b64_bytes, Jwk};
use crate::token::{CompactToken, TokenError};

pub const ENTITY_STATEMENT_TYP: &str = "entity-statement+jwt";
pub const TRUST_MARK_TYP: &str = "trust-mark+jwt";
pub const DEFAULT_MAX_DEPTH: usize = 8;
pub const DEFAULT_STATUS_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FederationError {
    #[error("signing key unavailable: {0}")]
    SigningKeyUnavailable(String),
    #[error("malformed statement: {0}")]
    Malformed(String),
    #[error("statement must satisfy exp > iat")]
    InvalidValidity,
}

impl From<TokenError> for FederationError {
    fn from(e: TokenError) -> Self {
        match e {
            TokenError::Key(crate::keys::KeyError::SigningKeyUnavailable(k)) => {
                FederationError::SigningKeyUnavailable(k)
            }
            other => FederationError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustMarkClaims {
    pub id: String,
    pub trust_mark_type: String,
    pub iss: String,
    pub sub: String,
    pub status_endpoint: String,
    pub iat: u64,
}

/// A signed compliance marker with a status endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustMark {
    token: CompactToken,
    claims: TrustMarkClaims,
}

impl TrustMark {
    pub fn issue(issuer_key: &Jwk, claims: TrustMarkClaims) -> Result<Self, FederationError> {
        let token = CompactToken::sign(issuer_key, TRUST_MARK_TYP, &claims, false)?;
        Ok(Self { token, claims })
    }

    pub fn parse(raw: &str) -> Result<Self, FederationError> {
        let token = CompactToken::parse(raw)?;
        let claims = token.claims_unverified()?;
        Ok(Self { token, claims })
    }

    pub fn claims(&self) -> &TrustMarkClaims {
        &self.claims
    }

    pub fn mark_id(&self) -> &str {
        &self.claims.id
    }

    pub fn compact(&self) -> &str {
        self.token.as_str()
    }

    pub fn verify_with(&self, keys: &[Jwk]) -> bool {
        self.token.verify_any(keys).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementClaims {
    pub iss: String,
    pub sub: String,
    pub iat: u64,
    pub exp: u64,
    pub jwks: Vec<Jwk>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub authority_hints: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trust_marks: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub trust_mark_issuers: BTreeMap<String, Vec<String>>,
}

/// Input to [`build_entity_statement`].
#[derive(Debug, Clone, Default)]
pub struct StatementFields {
    pub issuer_id: String,
    pub subject_id: String,
    pub jwks: Vec<Jwk>,
    pub authority_hints: Vec<String>,
    pub trust_marks: Vec<TrustMark>,
    pub trust_mark_issuers: BTreeMap<String, Vec<String>>,
    pub iat: u64,
    pub exp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityStatement {
    token: CompactToken,
    claims: StatementClaims,
    marks: Vec<TrustMark>,
}

pub fn build_entity_statement(
    signing_key: &Jwk,
    fields: StatementFields,
) -> Result<EntityStatement, FederationError> {
    if fields.exp <= fields.iat {
        return Err(FederationError::InvalidValidity);
    }
    let claims = StatementClaims {
        iss: fields.issuer_id,
        sub: fields.subject_id,
        iat: fields.iat,
        exp: fields.exp,
        jwks: fields.jwks.iter().map(Jwk::to_public).collect(),
        authority_hints: fields.authority_hints,
        trust_marks: fields.trust_marks.iter().map(|m| m.compact().to_string()).collect(),
        trust_mark_issuers: fields.trust_mark_issuers,
    };
    let token = CompactToken::sign(signing_key, ENTITY_STATEMENT_TYP, &claims, false)?;
    Ok(EntityStatement {
        token,
        claims,
        marks: fields.trust_marks,
    })
}

impl EntityStatement {
    pub fn parse(raw: &str) -> Result<Self, FederationError> {
        let token = CompactToken::parse(raw)?;
        let claims: StatementClaims = token.claims_unverified()?;
        let marks = claims
            .trust_marks
            .iter()
            .map(|m| TrustMark::parse(m))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { token, claims, marks })
    }

    pub fn claims(&self) -> &StatementClaims {
        &self.claims
    }

    pub fn issuer(&self) -> &str {
        &self.claims.iss
    }

    pub fn subject(&self) -> &str {
        &self.claims.sub
    }

    pub fn is_configuration(&self) -> bool {
        self.claims.iss == self.claims.sub
    }

    pub fn trust_marks(&self) -> &[TrustMark] {
        &self.marks
    }

    pub fn compact(&self) -> &str {
        self.token.as_str()
    }

    pub fn token(&self) -> &CompactToken {
        &self.token
    }

    pub fn digest(&self) -> Digest {
        Digest::of(self.token.as_str().as_bytes())
    }

    pub fn verify_with(&self, keys: &[Jwk]) -> bool {
        self.token.verify_any(keys).is_some()
    }

    pub fn is_current(&self, now: u64) -> bool {
        self.claims.iat <= now && now < self.claims.exp
    }
}

/// Models the TLS server certificate of a federation endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointCert {
    pub entity_id: String,
    pub public_key: Jwk,
    pub not_before: u64,
    pub not_after: u64,
}

impl EndpointCert {
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical_json(self)
    }

    pub fn fingerprint(&self) -> Digest {
        canonical_json_digest(self)
    }
}

/// Out-of-band trust material a verifier needs for a federation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustBundle {
    pub anchor_key: Jwk,
    /// Status endpoint URL -> pinned certificate fingerprint.
    pub pinned_certs: BTreeMap<String, Digest>,
}

/// Source of entity configurations and subordinate statements.
pub trait EntityFetcher: Send + Sync {
    fn fetch_configuration(&self, entity_id: &str) -> Result<String, FetchError>;
    fn fetch_subordinate(&self, issuer_id: &str, subject_id: &str) -> Result<String, FetchError>;
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum FetchError {
    #[error("entity {0} not found")]
    NotFound(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusResponse {
    pub body: Vec<u8>,
    /// Certificate the endpoint presented for the connection.
    pub cert: EndpointCert,
    /// Simulated time the endpoint took to answer.
    pub latency: Duration,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TransportFailure {
    #[error("connection refused")]
    ConnectionRefused,
    #[error("timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Other(String),
}

/// Carries trust-mark status requests to endpoints.
pub trait StatusTransport: Send + Sync {
    fn query_status(
        &self,
        endpoint: &str,
        body: &[u8],
        timeout: Duration,
    ) -> Result<StatusResponse, TransportFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkStatus {
    Active,
    Revoked,
    Unreachable,
    Silent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResult {
    pub mark_id: String,
    pub status: MarkStatus,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "b64_bytes::opt")]
    pub raw_response: Option<Vec<u8>>,
    /// `Digest::ZERO` when no connection was established.
    pub endpoint_cert_fingerprint: Digest,
    pub request_digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_digest: Option<Digest>,
    pub queried_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusRequest {
    pub trust_mark_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusBody {
    pub active: bool,
}

pub fn status_request_body(mark_id: &str) -> Vec<u8> {
    canonical_json(&StatusRequest {
        trust_mark_id: mark_id.to_string(),
    })
}

pub fn check_trust_mark_status(
    mark: &TrustMark,
    transport: &dyn StatusTransport,
    clock: &dyn Clock,
) -> StatusResult {
    check_trust_mark_status_with(mark, transport, clock, DEFAULT_STATUS_TIMEOUT)
}

pub fn check_trust_mark_status_with(
    mark: &TrustMark,
    transport: &dyn StatusTransport,
    clock: &dyn Clock,
    timeout: Duration,
) -> StatusResult {
    let body = status_request_body(mark.mark_id());
    let endpoint = mark.claims.status_endpoint.clone();
    let queried_at = clock.now();
    let mut result = StatusResult {
        mark_id: mark.mark_id().to_string(),
        status: MarkStatus::Unreachable,
        endpoint: endpoint.clone(),
        raw_response: None,
        endpoint_cert_fingerprint: Digest::ZERO,
        request_digest: Digest::of(&body),
        response_digest: None,
        queried_at,
    };
    let resp = match transport.query_status(&endpoint, &body, timeout) {
        Ok(resp) if resp.latency <= timeout => resp,
        _ => return result,
    };
    result.endpoint_cert_fingerprint = resp.cert.fingerprint();
    result.response_digest = Some(Digest::of(&resp.body));
    match serde_json::from_slice::<StatusBody>(&resp.body) {
        Ok(StatusBody { active: true }) => {
            result.status = MarkStatus::Active;
            result.raw_response = Some(resp.body);
        }
        Ok(StatusBody { active: false }) => {
            result.status = MarkStatus::Revoked;
            result.raw_response = Some(resp.body);
        }
        Err(_) => result.status = MarkStatus::Silent,
    }
    result
}

/// Ordered statements from leaf to anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustChain {
    statements: Vec<EntityStatement>,
}

impl TrustChain {
    pub fn new(statements: Vec<EntityStatement>) -> Self {
        Self { statements }
    }

    pub fn statements(&self) -> &[EntityStatement] {
        &self.statements
    }

    pub fn statements_mut(&mut self) -> &mut Vec<EntityStatement> {
        &mut self.statements
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    /// Entity ids from leaf to anchor.
    pub fn entities(&self) -> Vec<String> {
        self.configurations().map(|s| s.subject().to_string()).collect()
    }

    pub fn configurations(&self) -> impl Iterator<Item = &EntityStatement> {
        self.statements.iter().step_by(2)
    }

    pub fn leaf(&self) -> Option<&EntityStatement> {
        self.statements.first()
    }

    pub fn anchor(&self) -> Option<&EntityStatement> {
        self.statements.last()
    }

    /// Keys the chain vouches for `entity_id`: the superior's statement about
    /// it, or the pinned anchor key for the anchor itself.
    pub fn vouched_keys(&self, entity_id: &str, anchor_key: &Jwk) -> Option<Vec<Jwk>> {
        let n = self.statements.len();
        for i in (0..n).step_by(2) {
            if self.statements[i].subject() == entity_id {
                return Some(if i + 1 < n {
                    self.statements[i + 1].claims.jwks.clone()
                } else {
                    vec![anchor_key.to_public()]
                });
            }
        }
        None
    }

    pub fn statement_digests(&self) -> Vec<Digest> {
        self.statements.iter().map(EntityStatement::digest).collect()
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("failed to fetch {0}")]
    FetchFailed(String),
    #[error("chain exceeds maximum depth")]
    DepthExceeded,
    #[error("authority hints form a cycle at {0}")]
    CycleDetected(String),
    #[error("malformed statement from {0}: {1}")]
    Malformed(String, String),
}

pub fn resolve_trust_chain(leaf_id: &str, fetcher: &dyn EntityFetcher) -> Result<TrustChain, ResolveError> {
    resolve_trust_chain_with_depth(leaf_id, fetcher, DEFAULT_MAX_DEPTH)
}

/// Follow the first authority hint of each entity until one has none.
/// `max_depth` bounds the number of entities in the chain.
pub fn resolve_trust_chain_with_depth(
    leaf_id: &str,
    fetcher: &dyn EntityFetcher,
    max_depth: usize,
) -> Result<TrustChain, ResolveError> {
    let fetch_ec = |id: &str| -> Result<EntityStatement, ResolveError> {
        let raw = fetcher
            .fetch_configuration(id)
            .map_err(|_| ResolveError::FetchFailed(id.to_string()))?;
        let ec = EntityStatement::parse(&raw).map_err(|e| ResolveError::Malformed(id.to_string(), e.to_string()))?;
        if ec.issuer() != id || ec.subject() != id {
            return Err(ResolveError::Malformed(id.to_string(), "not a configuration for this entity".into()));
        }
        Ok(ec)
    };

    let mut current = fetch_ec(leaf_id)?;
    let mut visited = BTreeSet::from([leaf_id.to_string()]);
    let mut statements = vec![current.clone()];
    while let Some(superior) = current.claims.authority_hints.first().cloned() {
        if visited.contains(&superior) {
            return Err(ResolveError::CycleDetected(superior));
        }
        if visited.len() >= max_depth {
            return Err(ResolveError::DepthExceeded);
        }
        let raw = fetcher
            .fetch_subordinate(&superior, current.subject())
            .map_err(|_| ResolveError::FetchFailed(superior.clone()))?;
        let sub = EntityStatement::parse(&raw)
            .map_err(|e| ResolveError::Malformed(superior.clone(), e.to_string()))?;
        if sub.issuer() != superior || sub.subject() != current.subject() {
            return Err(ResolveError::Malformed(superior.clone(), "subordinate statement names the wrong parties".into()));
        }
        let sup_ec = fetch_ec(&superior)?;
        statements.push(sub);
        statements.push(sup_ec.clone());
        visited.insert(superior);
        current = sup_ec;
    }
    Ok(TrustChain { statements })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    AnchorMismatch,
    BrokenChain,
    ResolutionFailed,
    BadSignature,
    StatementExpired,
    MarkIssuerUnauthorized,
    MarkInvalid,
    MissingRequiredMark,
    MarkRevoked,
    MarkSilent,
    MarkUnreachable,
}

impl ReasonCode {
    /// Lower tiers win when several faults are present.
    fn tier(self) -> u8 {
        match self {
            ReasonCode::AnchorMismatch => 0,
            ReasonCode::BrokenChain | ReasonCode::ResolutionFailed => 1,
            ReasonCode::BadSignature => 2,
            ReasonCode::StatementExpired => 3,
            ReasonCode::MarkIssuerUnauthorized | ReasonCode::MarkInvalid | ReasonCode::MissingRequiredMark => 4,
            ReasonCode::MarkRevoked | ReasonCode::MarkSilent | ReasonCode::MarkUnreachable => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Valid,
    Invalid { reason: ReasonCode, entity_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityResult {
    pub entity_id: String,
    pub signature_ok: bool,
    pub unexpired: bool,
    pub marks: Vec<StatusResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub reason: ReasonCode,
    pub entity_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainVerdict {
    pub outcome: Outcome,
    pub entities: Vec<EntityResult>,
    /// Every fault found, in detection order.
    pub faults: Vec<Fault>,
    pub anchor_key_fingerprint: Digest,
}

impl ChainVerdict {
    pub fn is_valid(&self) -> bool {
        self.outcome == Outcome::Valid
    }

    pub fn reason(&self) -> Option<ReasonCode> {
        match &self.outcome {
            Outcome::Valid => None,
            Outcome::Invalid { reason, .. } => Some(*reason),
        }
    }

    /// A verdict for a chain that could not be resolved at all.
    pub fn unresolved(entity_id: &str, anchor_key: &Jwk) -> Self {
        let mut v = ChainVerdict {
            outcome: Outcome::Valid,
            entities: vec![],
            faults: vec![],
            anchor_key_fingerprint: anchor_key.fingerprint(),
        };
        v.push_fault(ReasonCode::ResolutionFailed, entity_id);
        v
    }

    /// Record a fault and recompute the outcome.
    pub fn push_fault(&mut self, reason: ReasonCode, entity_id: &str) {
        self.faults.push(Fault {
            reason,
            entity_id: entity_id.to_string(),
        });
        let worst = self
            .faults
            .iter()
            .min_by_key(|f| f.reason.tier())
            .expect("just pushed");
        self.outcome = Outcome::Invalid {
            reason: worst.reason,
            entity_id: worst.entity_id.clone(),
        };
    }

    /// All status results in query order.
    pub fn status_results(&self) -> impl Iterator<Item = &StatusResult> {
        self.entities.iter().flat_map(|e| e.marks.iter())
    }
}

/// Verify signatures, validity periods and trust-mark status of a chain.
///
/// Failures are recorded in the verdict, never returned as errors. Every
/// trust mark of every entity configuration is queried exactly once, even
/// after an earlier fault, so the verdict carries the full diagnostic.
pub fn verify_trust_chain(
    chain: &TrustChain,
    anchor_key: &Jwk,
    transport: &dyn StatusTransport,
    clock: &dyn Clock,
) -> ChainVerdict {
    let mut verdict = ChainVerdict {
        outcome: Outcome::Valid,
        entities: vec![],
        faults: vec![],
        anchor_key_fingerprint: anchor_key.fingerprint(),
    };
    let st = &chain.statements;
    let n = st.len();
    let now = clock.now();
    let anchor_pub = anchor_key.to_public();

    if n == 0 || n % 2 == 0 {
        verdict.push_fault(ReasonCode::BrokenChain, st.first().map(|s| s.subject()).unwrap_or(""));
        return verdict;
    }
    for i in (0..n).step_by(2) {
        let ec = &st[i];
        if !ec.is_configuration() {
            verdict.push_fault(ReasonCode::BrokenChain, ec.subject());
        }
        if i + 1 < n {
            let sub = &st[i + 1];
            if sub.subject() != ec.subject() || sub.issuer() != st[i + 2].subject() {
                verdict.push_fault(ReasonCode::BrokenChain, sub.issuer());
            }
        }
    }

    let anchor = &st[n - 1];
    let anchor_id = anchor.subject().to_string();
    if !anchor.claims.jwks.iter().any(|k| k.fingerprint() == anchor_pub.fingerprint()) {
        verdict.push_fault(ReasonCode::AnchorMismatch, &anchor_id);
    }

    // Keys vouched for the issuer of a subordinate statement at index i.
    let issuer_keys = |i: usize| -> Vec<Jwk> {
        if i + 1 == n - 1 {
            vec![anchor_pub.clone()]
        } else {
            st[i + 2].claims.jwks.clone()
        }
    };
    let trust_mark_issuers = &anchor.claims.trust_mark_issuers;

    for i in (0..n).step_by(2) {
        let ec = &st[i];
        let entity = ec.subject().to_string();
        let vouched = if i + 1 < n {
            st[i + 1].claims.jwks.clone()
        } else {
            vec![anchor_pub.clone()]
        };

        let mut signature_ok = ec.verify_with(&vouched);
        if !signature_ok {
            verdict.push_fault(ReasonCode::BadSignature, &entity);
        }
        let mut unexpired = ec.is_current(now);
        if !unexpired {
            verdict.push_fault(ReasonCode::StatementExpired, &entity);
        }
        if i + 1 < n {
            let sub = &st[i + 1];
            if !sub.verify_with(&issuer_keys(i + 1)) {
                signature_ok = false;
                verdict.push_fault(ReasonCode::BadSignature, sub.issuer());
            }
            if !sub.is_current(now) {
                unexpired = false;
                verdict.push_fault(ReasonCode::StatementExpired, sub.issuer());
            }
        }

        let mut marks = Vec::with_capacity(ec.trust_marks().len());
        for mark in ec.trust_marks() {
            let c = mark.claims();
            let authorized = trust_mark_issuers
                .get(&c.trust_mark_type)
                .is_some_and(|issuers| issuers.iter().any(|x| x == &c.iss));
            if !authorized {
                verdict.push_fault(ReasonCode::MarkIssuerUnauthorized, &entity);
            } else {
                let keys = chain.vouched_keys(&c.iss, &anchor_pub).unwrap_or_default();
                if c.sub != entity || !mark.verify_with(&keys) {
                    verdict.push_fault(ReasonCode::MarkInvalid, &entity);
                }
            }
            let status = check_trust_mark_status(mark, transport, clock);
            match status.status {
                MarkStatus::Active => {}
                MarkStatus::Revoked => verdict.push_fault(ReasonCode::MarkRevoked, &entity),
                MarkStatus::Silent => verdict.push_fault(ReasonCode::MarkSilent, &entity),
                MarkStatus::Unreachable => verdict.push_fault(ReasonCode::MarkUnreachable, &entity),
            }
            marks.push(status);
        }

        verdict.entities.push(EntityResult {
            entity_id: entity,
            signature_ok,
            unexpired,
            marks,
        });
    }
    verdict
}

/// Record a fault if the leaf lacks any of the required mark types.
pub fn require_mark_types(verdict: &mut ChainVerdict, chain: &TrustChain, required: &[String]) {
    let Some(leaf) = chain.leaf() else {
        return;
    };
    let held: BTreeSet<&str> = leaf
        .trust_marks()
        .iter()
        .map(|m| m.claims().trust_mark_type.as_str())
        .collect();
    if required.iter().any(|r| !held.contains(r.as_str())) {
        verdict.push_fault(ReasonCode::MissingRequiredMark, leaf.subject());
    }
}
