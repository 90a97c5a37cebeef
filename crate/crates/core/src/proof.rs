//! Publishable proofs that an attested verification happened.
//!
//! The only bundled backend is `transcript`: the proof is the quote plus the
//! public inputs the statement leaves out, and verification re-runs quote
//! verification. It is neither succinct nor zero-knowledge and says so in
//! its registry entry.
//!
//! Statement encoding mirrors the public inputs layout: each field as a
//! 4-byte big-endian length then bytes, in the order root fingerprint,
//! credential digest, measurement, policy digest, `verified_at` (8 bytes
//! big-endian), outcome (1 byte).

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::attested::AttestedClaims;
use crate::digest::Digest;
use crate::enclave::{put_field, verify_quote, PublicInputs, Quote, QuoteVerdict};
use crate::keys::b64_bytes;

pub const TRANSCRIPT_BACKEND: &str = "transcript";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStatement {
    pub root_of_trust_fingerprint: Digest,
    pub credential_digest: Digest,
    pub measurement: Digest,
    pub policy_digest: Digest,
    pub verified_at: u64,
    pub outcome: bool,
}

impl ProofStatement {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_field(&mut out, self.root_of_trust_fingerprint.as_bytes());
        put_field(&mut out, self.credential_digest.as_bytes());
        put_field(&mut out, self.measurement.as_bytes());
        put_field(&mut out, self.policy_digest.as_bytes());
        put_field(&mut out, &self.verified_at.to_be_bytes());
        put_field(&mut out, &[self.outcome as u8]);
        out
    }

    pub fn from_attested(claims: &AttestedClaims) -> Self {
        Self {
            root_of_trust_fingerprint: claims.quote.root_fingerprint(),
            credential_digest: claims.original_credential_digest,
            measurement: claims.quote.measurement,
            policy_digest: claims.policy_digest,
            verified_at: claims.verified_at,
            outcome: claims.verification_result.outcome == 1,
        }
    }
}

pub fn statement_digest(s: &ProofStatement) -> Digest {
    Digest::of(&s.encode())
}

/// Wire envelope `{backend_id, payload_b64}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    pub backend_id: String,
    #[serde(rename = "payload_b64", with = "b64_bytes")]
    pub payload: Vec<u8>,
}

/// Private material a prover holds: the quote and the public inputs it binds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Witness {
    pub quote: Quote,
    pub public_inputs: PublicInputs,
}

impl Witness {
    pub fn from_attested(claims: &AttestedClaims) -> Self {
        Self {
            quote: claims.quote.clone(),
            public_inputs: claims.public_inputs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProofError {
    #[error("unknown proof backend {0:?}")]
    UnknownBackend(String),
    #[error("witness does not correspond to the statement")]
    WitnessStatementMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub backend_id: String,
    pub succinct: bool,
    pub zero_knowledge: bool,
}

pub trait ProofBackend: Send + Sync {
    fn info(&self) -> BackendInfo;
    fn prove(&self, s: &ProofStatement, w: &Witness) -> Result<Proof, ProofError>;
    fn verify(&self, s: &ProofStatement, p: &Proof, trusted_roots: &[Digest]) -> bool;
    /// Backends claiming zero knowledge must supply a witness
    /// indistinguishability self-test; `None` means no hook.
    fn wi_self_test(&self) -> Option<bool> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("backend {0} claims zero knowledge without a passing self-test")]
    ZeroKnowledgeUnproven(String),
    #[error("backend {0} already registered")]
    Duplicate(String),
}

#[derive(Default, Clone)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn ProofBackend>>,
}

impl BackendRegistry {
    pub fn with_defaults() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(TranscriptBackend)).expect("transcript backend registers");
        r
    }

    pub fn register(&mut self, backend: Arc<dyn ProofBackend>) -> Result<(), RegistryError> {
        let info = backend.info();
        if info.zero_knowledge && backend.wi_self_test() != Some(true) {
            return Err(RegistryError::ZeroKnowledgeUnproven(info.backend_id));
        }
        if self.backends.contains_key(&info.backend_id) {
            return Err(RegistryError::Duplicate(info.backend_id));
        }
        self.backends.insert(info.backend_id, backend);
        Ok(())
    }

    pub fn get(&self, backend_id: &str) -> Result<&Arc<dyn ProofBackend>, ProofError> {
        self.backends
            .get(backend_id)
            .ok_or_else(|| ProofError::UnknownBackend(backend_id.to_string()))
    }

    pub fn infos(&self) -> Vec<BackendInfo> {
        self.backends.values().map(|b| b.info()).collect()
    }

    pub fn verify(
        &self,
        backend_id: &str,
        s: &ProofStatement,
        p: &Proof,
        trusted_roots: &[Digest],
    ) -> Result<bool, ProofError> {
        let backend = self.get(backend_id)?;
        Ok(p.backend_id == backend_id && backend.verify(s, p, trusted_roots))
    }
}

pub fn default_registry() -> &'static BackendRegistry {
    static REGISTRY: OnceLock<BackendRegistry> = OnceLock::new();
    REGISTRY.get_or_init(BackendRegistry::with_defaults)
}

pub fn verify_proof(
    backend_id: &str,
    s: &ProofStatement,
    p: &Proof,
    trusted_roots: &[Digest],
) -> Result<bool, ProofError> {
    default_registry().verify(backend_id, s, p, trusted_roots)
}

pub fn prove_transcript_backend(s: &ProofStatement, w: &Witness) -> Result<Proof, ProofError> {
    TranscriptBackend.prove(s, w)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TranscriptBackend;

#[derive(Serialize, Deserialize)]
struct TranscriptPayload {
    quote: Quote,
    anchor_key_fingerprint: Digest,
    endpoint_cert_fingerprints: Vec<Digest>,
}

fn inputs_for(s: &ProofStatement, anchor_key_fingerprint: Digest, fps: Vec<Digest>) -> PublicInputs {
    PublicInputs {
        credential_digest: s.credential_digest,
        anchor_key_fingerprint,
        endpoint_cert_fingerprints: fps,
        measurement: s.measurement,
        policy_digest: s.policy_digest,
        verified_at: s.verified_at,
        outcome: s.outcome,
    }
}

impl ProofBackend for TranscriptBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            backend_id: TRANSCRIPT_BACKEND.into(),
            succinct: false,
            zero_knowledge: false,
        }
    }

    fn prove(&self, s: &ProofStatement, w: &Witness) -> Result<Proof, ProofError> {
        let inputs = inputs_for(
            s,
            w.public_inputs.anchor_key_fingerprint,
            w.public_inputs.sorted_fingerprints(),
        );
        let root = &w.quote.endorsement.root_cert;
        if root.fingerprint() != s.root_of_trust_fingerprint
            || verify_quote(&w.quote, root, &s.measurement, &inputs) != QuoteVerdict::Valid
        {
            return Err(ProofError::WitnessStatementMismatch);
        }
        let payload = TranscriptPayload {
            quote: w.quote.clone(),
            anchor_key_fingerprint: inputs.anchor_key_fingerprint,
            endpoint_cert_fingerprints: inputs.endpoint_cert_fingerprints,
        };
        Ok(Proof {
            backend_id: TRANSCRIPT_BACKEND.into(),
            payload: crate::digest::canonical_json(&payload),
        })
    }

    fn verify(&self, s: &ProofStatement, p: &Proof, trusted_roots: &[Digest]) -> bool {
        let Ok(payload) = serde_json::from_slice::<TranscriptPayload>(&p.payload) else {
            return false;
        };
        let root = &payload.quote.endorsement.root_cert;
        let root_fp = root.fingerprint();
        if root_fp != s.root_of_trust_fingerprint || !trusted_roots.contains(&root_fp) {
            return false;
        }
        let inputs = inputs_for(s, payload.anchor_key_fingerprint, payload.endpoint_cert_fingerprints);
        verify_quote(&payload.quote, root, &s.measurement, &inputs) == QuoteVerdict::Valid
    }
}
