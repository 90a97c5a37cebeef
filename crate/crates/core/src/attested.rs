//! The wallet-signed JWT-VC vouching that a source credential was verified
//! inside an attested run.

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::credential::{credential_digest, SdJwtVc};
use crate::digest::Digest;
use crate::enclave::{PublicInputs, Quote, VerificationTranscript};
use crate::federation::{ChainVerdict, ReasonCode};
use crate::keys::Jwk;
use crate::token::{CompactToken, TokenError};

pub const ATTESTED_TYP: &str = "vc+jwt";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttestedError {
    #[error("preflight verdict is not valid")]
    NonValidVerdict,
    #[error("quote does not bind the source credential")]
    QuoteMismatch,
    #[error("signing key unavailable: {0}")]
    SigningKeyUnavailable(String),
    #[error("malformed attested credential: {0}")]
    Malformed(String),
    #[error("wallet signature does not verify")]
    SignatureInvalid,
}

impl From<TokenError> for AttestedError {
    fn from(e: TokenError) -> Self {
        match e {
            TokenError::SignatureInvalid => AttestedError::SignatureInvalid,
            TokenError::Key(crate::keys::KeyError::SigningKeyUnavailable(k)) => AttestedError::SigningKeyUnavailable(k),
            other => AttestedError::Malformed(other.to_string()),
        }
    }
}

/// Outcome of the attested run as embedded in the credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationSummary {
    /// 1 when credential and chain were valid inside the enclave.
    pub outcome: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ReasonCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offending_entity: Option<String>,
    pub entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestedClaims {
    pub iss: String,
    pub iat: u64,
    pub original_credential_digest: Digest,
    /// Digest of the source's issuer-signed token alone, so a presentation
    /// with fewer disclosures can still be linked.
    pub issuer_jwt_digest: Digest,
    pub verification_result: VerificationSummary,
    pub verified_at: u64,
    pub validity_window_s: u64,
    pub quote: Quote,
    pub endpoint_cert_fingerprints: Vec<Digest>,
    pub anchor_key_fingerprint: Digest,
    pub policy_digest: Digest,
}

impl AttestedClaims {
    /// The public inputs this credential claims its quote binds.
    pub fn public_inputs(&self) -> PublicInputs {
        PublicInputs {
            credential_digest: self.original_credential_digest,
            anchor_key_fingerprint: self.anchor_key_fingerprint,
            endpoint_cert_fingerprints: self.endpoint_cert_fingerprints.clone(),
            measurement: self.quote.measurement,
            policy_digest: self.policy_digest,
            verified_at: self.verified_at,
            outcome: self.verification_result.outcome == 1,
        }
    }

    pub fn fresh_at(&self, now: u64) -> bool {
        self.verified_at <= now && now < self.verified_at.saturating_add(self.validity_window_s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestedCredential {
    jwt_vc: CompactToken,
    claims: AttestedClaims,
}

impl AttestedCredential {
    pub fn parse(raw: &str) -> Result<Self, AttestedError> {
        let jwt_vc = CompactToken::parse(raw.trim())?;
        let claims = jwt_vc.claims_unverified()?;
        Ok(Self { jwt_vc, claims })
    }

    pub fn compact(&self) -> &str {
        self.jwt_vc.as_str()
    }

    pub fn token(&self) -> &CompactToken {
        &self.jwt_vc
    }

    pub fn claims(&self) -> &AttestedClaims {
        &self.claims
    }

    pub fn outcome(&self) -> bool {
        self.claims.verification_result.outcome == 1
    }

    /// The wallet key embedded in the header.
    pub fn wallet_key(&self) -> Option<&Jwk> {
        self.jwt_vc.header().jwk.as_ref()
    }

    /// Check the wallet signature under the header-embedded key.
    pub fn verify_signature(&self) -> bool {
        self.wallet_key().is_some_and(|k| self.jwt_vc.verify_with(k))
    }
}

/// Mint the attested credential. `preflight` is the caller's out-of-enclave
/// verdict and must be valid; the enclave's own outcome, carried by
/// `transcript`, is what the credential records.
pub fn issue_attested_jwt_vc(
    wallet_key: &Jwk,
    holder_id: &str,
    source: &SdJwtVc,
    quote: &Quote,
    transcript: &VerificationTranscript,
    preflight: &ChainVerdict,
    window_s: u64,
    clock: &dyn Clock,
) -> Result<AttestedCredential, AttestedError> {
    if !preflight.is_valid() {
        return Err(AttestedError::NonValidVerdict);
    }
    let inputs = transcript.public_inputs();
    let source_digest = credential_digest(source.compact_form().as_bytes());
    if inputs.credential_digest != source_digest
        || quote.report_data.as_slice() != inputs.report_data().as_slice()
        || quote.measurement != inputs.measurement
        || quote.timestamp != inputs.verified_at
        || !quote.self_consistent()
    {
        return Err(AttestedError::QuoteMismatch);
    }
    let claims = AttestedClaims {
        iss: holder_id.to_string(),
        iat: clock.now(),
        original_credential_digest: source_digest,
        issuer_jwt_digest: Digest::of(source.issuer_jwt().as_str().as_bytes()),
        verification_result: summarize(&transcript.chain_verdict, inputs.outcome),
        verified_at: inputs.verified_at,
        validity_window_s: window_s,
        quote: quote.clone(),
        endpoint_cert_fingerprints: inputs.sorted_fingerprints(),
        anchor_key_fingerprint: inputs.anchor_key_fingerprint,
        policy_digest: inputs.policy_digest,
    };
    let jwt_vc = CompactToken::sign(wallet_key, ATTESTED_TYP, &claims, true)?;
    Ok(AttestedCredential { jwt_vc, claims })
}

fn summarize(verdict: &ChainVerdict, outcome: bool) -> VerificationSummary {
    let (reason, offending_entity) = match &verdict.outcome {
        crate::federation::Outcome::Valid => (None, None),
        crate::federation::Outcome::Invalid { reason, entity_id } => (Some(*reason), Some(entity_id.clone())),
    };
    VerificationSummary {
        outcome: outcome as u8,
        reason,
        offending_entity,
        entities: verdict.entities.iter().map(|e| e.entity_id.clone()).collect(),
    }
}
