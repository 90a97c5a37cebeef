//! Holder-side flows: export from the IT-Wallet, attested re-issuance,
//! proof publication, presentation, and the relying party's offline check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attested::{issue_attested_jwt_vc, AttestedCredential, AttestedError};
use crate::clock::Clock;
use crate::credential::{check_disclosures, credential_digest, present, CredentialError, SdJwtVc};
use crate::digest::Digest;
use crate::enclave::{
    run_attested_verification, verify_credential, verify_quote, EnclaveError, FederationContext, Platform,
    QuoteVerdict, WorkloadDescriptor,
};
use crate::federation::ChainVerdict;
use crate::keys::Jwk;
use crate::ledger::{Chain, EventRef, LedgerError, PROOF_VERIFIED};
use crate::proof::{default_registry, statement_digest, ProofError, ProofStatement, Witness};

pub const DEFAULT_VALIDITY_WINDOW_S: u64 = 7 * 24 * 3600;

#[derive(Debug, thiserror::Error)]
pub enum WalletError {
    #[error("no authenticated eID session")]
    NotAuthenticated,
    #[error("unknown credential {0:?}")]
    UnknownCredential(String),
    #[error("preflight verification failed")]
    PreflightFailed {
        verdict: Box<ChainVerdict>,
        credential_error: Option<String>,
    },
    #[error(transparent)]
    EnclaveTransportCompromised(EnclaveError),
    #[error(transparent)]
    Issuance(#[from] AttestedError),
    #[error("proof rejected: {0}")]
    ProofRejected(String),
    #[error("credential {0:?} has no published proof")]
    NotPublished(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Credential(#[from] CredentialError),
}

impl WalletError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            WalletError::NotAuthenticated => "NotAuthenticated",
            WalletError::UnknownCredential(_) => "UnknownCredential",
            WalletError::PreflightFailed { .. } => "PreflightFailed",
            WalletError::EnclaveTransportCompromised(_) => "EnclaveTransportCompromised",
            WalletError::Issuance(_) => "IssuanceFailed",
            WalletError::ProofRejected(_) => "ProofRejected",
            WalletError::NotPublished(_) => "NotPublished",
            WalletError::Ledger(_) => "LedgerError",
            WalletError::Credential(_) => "CredentialError",
        }
    }
}

/// Identifier a wallet files a credential under.
pub fn credential_id(cred: &SdJwtVc) -> String {
    credential_id_of(&cred.digest())
}

pub fn credential_id_of(digest: &Digest) -> String {
    digest.to_hex()[..16].to_string()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimItWallet {
    pub holder_id: String,
    credentials: BTreeMap<String, String>,
    #[serde(default)]
    session: bool,
}

impl SimItWallet {
    pub fn new(holder_id: impl Into<String>) -> Self {
        Self {
            holder_id: holder_id.into(),
            ..Self::default()
        }
    }

    pub fn store(&mut self, id: impl Into<String>, cred: &SdJwtVc) {
        self.credentials.insert(id.into(), cred.compact_form());
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.credentials.keys().map(String::as_str)
    }

    /// Simulated eID authentication.
    pub fn login(&mut self) {
        self.session = true;
    }

    pub fn logout(&mut self) {
        self.session = false;
    }

    pub fn is_authenticated(&self) -> bool {
        self.session
    }

    pub fn export_credential(&self, cred_id: &str) -> Result<SdJwtVc, WalletError> {
        if !self.session {
            return Err(WalletError::NotAuthenticated);
        }
        let raw = self
            .credentials
            .get(cred_id)
            .ok_or_else(|| WalletError::UnknownCredential(cred_id.to_string()))?;
        Ok(SdJwtVc::parse(raw)?)
    }
}

pub struct EnclaveContext<'a> {
    pub platform: &'a Platform,
    pub workload: &'a WorkloadDescriptor,
}

/// Serializable wallet contents minus the private key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WalletState {
    pub holder_id: String,
    pub key_id: String,
    pub validity_window_s: u64,
    pub imported: BTreeMap<String, String>,
    pub attested: BTreeMap<String, String>,
    pub event_refs: BTreeMap<String, Vec<EventRef>>,
}

#[derive(Debug, Clone)]
pub struct SsiWallet {
    key: Jwk,
    holder_id: String,
    validity_window_s: u64,
    imported: BTreeMap<String, SdJwtVc>,
    attested: BTreeMap<String, AttestedCredential>,
    event_refs: BTreeMap<String, Vec<EventRef>>,
}

impl SsiWallet {
    pub fn new(key: Jwk, holder_id: impl Into<String>) -> Self {
        Self {
            key,
            holder_id: holder_id.into(),
            validity_window_s: DEFAULT_VALIDITY_WINDOW_S,
            imported: BTreeMap::new(),
            attested: BTreeMap::new(),
            event_refs: BTreeMap::new(),
        }
    }

    pub fn with_window(mut self, window_s: u64) -> Self {
        self.validity_window_s = window_s;
        self
    }

    pub fn holder_id(&self) -> &str {
        &self.holder_id
    }

    pub fn key(&self) -> &Jwk {
        &self.key
    }

    pub fn validity_window_s(&self) -> u64 {
        self.validity_window_s
    }

    pub fn import(&mut self, cred: SdJwtVc) -> String {
        let id = credential_id(&cred);
        self.imported.insert(id.clone(), cred);
        id
    }

    pub fn imported(&self, cred_id: &str) -> Option<&SdJwtVc> {
        self.imported.get(cred_id)
    }

    pub fn attested(&self, cred_id: &str) -> Option<&AttestedCredential> {
        self.attested.get(cred_id)
    }

    pub fn event_refs(&self, cred_id: &str) -> &[EventRef] {
        self.event_refs.get(cred_id).map(Vec::as_slice).unwrap_or_default()
    }

    /// Verify outside the enclave, then inside, then mint. An invalid
    /// preflight returns before the platform is touched.
    pub fn create_attested_credential(
        &mut self,
        cred: &SdJwtVc,
        federation: &FederationContext<'_>,
        enclave: &EnclaveContext<'_>,
        clock: &dyn Clock,
    ) -> Result<AttestedCredential, WalletError> {
        let (verdict, cred_result) = verify_credential(
            cred,
            federation.fetcher,
            federation.transport,
            &federation.trust.anchor_key,
            &enclave.workload.policy,
            clock,
        );
        if !verdict.is_valid() || cred_result.is_err() {
            return Err(WalletError::PreflightFailed {
                verdict: Box::new(verdict),
                credential_error: cred_result.err().map(|e| e.to_string()),
            });
        }
        let (transcript, quote) =
            run_attested_verification(enclave.platform, enclave.workload, cred, federation, clock)
                .map_err(WalletError::EnclaveTransportCompromised)?;
        let attested = issue_attested_jwt_vc(
            &self.key,
            &self.holder_id,
            cred,
            &quote,
            &transcript,
            &verdict,
            self.validity_window_s,
            clock,
        )?;
        let id = self.import(cred.clone());
        self.attested.insert(id, attested.clone());
        Ok(attested)
    }

    /// Prove and submit. The credential must be one this wallet attested.
    pub fn publish_proof(
        &mut self,
        attested: &AttestedCredential,
        chain: &mut Chain,
        contract: &str,
    ) -> Result<EventRef, WalletError> {
        let digest = attested.claims().original_credential_digest;
        let id = self
            .attested
            .iter()
            .find(|(_, a)| a.claims().original_credential_digest == digest)
            .map(|(id, _)| id.clone())
            .ok_or_else(|| WalletError::UnknownCredential(digest.to_hex()))?;
        let backend_id = chain
            .contract(contract)
            .ok_or_else(|| LedgerError::UnknownContract(contract.to_string()))?
            .backend_id
            .clone();
        let statement = ProofStatement::from_attested(attested.claims());
        let witness = Witness::from_attested(attested.claims());
        let proof = default_registry()
            .get(&backend_id)
            .and_then(|b| b.prove(&statement, &witness))
            .map_err(|e: ProofError| WalletError::ProofRejected(e.to_string()))?;
        let receipt = chain.submit_proof_tx(contract, &statement, &proof)?;
        let event = match (receipt.success, receipt.events.first()) {
            (true, Some(e)) => e.event_ref(),
            _ => return Err(WalletError::ProofRejected(format!("tx {} failed", receipt.tx_digest))),
        };
        self.event_refs.entry(id).or_default().push(event);
        Ok(event)
    }

    /// Package the attested credential with a disclosure subset of the
    /// original and the latest event ref.
    pub fn present(&self, cred_id: &str, selected: &BTreeSet<String>) -> Result<PresentationPackage, WalletError> {
        let original = self
            .imported
            .get(cred_id)
            .ok_or_else(|| WalletError::UnknownCredential(cred_id.to_string()))?;
        let attested = self
            .attested
            .get(cred_id)
            .ok_or_else(|| WalletError::NotPublished(cred_id.to_string()))?;
        let event_ref = *self
            .event_refs(cred_id)
            .last()
            .ok_or_else(|| WalletError::NotPublished(cred_id.to_string()))?;
        Ok(PresentationPackage {
            attested_jwt_vc: attested.compact().to_string(),
            original_compact: present(original, selected)?.compact_form(),
            event_ref: Some(event_ref),
            full_form_commitment: attested.claims().original_credential_digest,
        })
    }

    pub fn to_state(&self) -> WalletState {
        WalletState {
            holder_id: self.holder_id.clone(),
            key_id: self.key.key_id.clone(),
            validity_window_s: self.validity_window_s,
            imported: self.imported.iter().map(|(k, v)| (k.clone(), v.compact_form())).collect(),
            attested: self.attested.iter().map(|(k, v)| (k.clone(), v.compact().to_string())).collect(),
            event_refs: self.event_refs.clone(),
        }
    }

    pub fn from_state(state: WalletState, key: Jwk) -> Result<Self, WalletError> {
        let imported = state
            .imported
            .into_iter()
            .map(|(k, v)| Ok((k, SdJwtVc::parse(&v)?)))
            .collect::<Result<_, WalletError>>()?;
        let attested = state
            .attested
            .into_iter()
            .map(|(k, v)| Ok((k, AttestedCredential::parse(&v)?)))
            .collect::<Result<_, WalletError>>()?;
        Ok(Self {
            key,
            holder_id: state.holder_id,
            validity_window_s: state.validity_window_s,
            imported,
            attested,
            event_refs: state.event_refs,
        })
    }
}

/// The JSON envelope a holder hands a relying party.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentationPackage {
    pub attested_jwt_vc: String,
    pub original_compact: String,
    #[serde(default)]
    pub event_ref: Option<EventRef>,
    /// SHA-256 of the full compact form the enclave attested.
    pub full_form_commitment: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Malformed,
    AttestedSignatureInvalid,
    NegativeOutcome,
    UntrustedRoot,
    QuoteInvalid,
    DigestMismatch,
    DisclosureInvalid,
    MissingEventRef,
    EventMismatch,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RpVerdict {
    Accept {
        holder: String,
        issuer: String,
        claims: BTreeMap<String, Value>,
        disclosed: BTreeSet<String>,
        verified_at: u64,
        event_ref: Option<EventRef>,
    },
    Reject {
        reason: RejectReason,
        detail: String,
    },
}

impl RpVerdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, RpVerdict::Accept { .. })
    }

    pub fn reject_reason(&self) -> Option<RejectReason> {
        match self {
            RpVerdict::Reject { reason, .. } => Some(*reason),
            RpVerdict::Accept { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RpOptions {
    /// Accept a package without an event ref on the strength of its quote.
    pub allow_offchain_only: bool,
}

fn reject(reason: RejectReason, detail: impl Into<String>) -> RpVerdict {
    RpVerdict::Reject {
        reason,
        detail: detail.into(),
    }
}

/// Check a package using only the ledger and local trust material. Takes no
/// federation handle, so it cannot reach one.
pub fn relying_party_verify(
    pkg: &PresentationPackage,
    chain: &Chain,
    trusted_roots: &[Digest],
    expected_measurement: &Digest,
    clock: &dyn Clock,
    opts: RpOptions,
) -> RpVerdict {
    let attested = match AttestedCredential::parse(&pkg.attested_jwt_vc) {
        Ok(a) => a,
        Err(e) => return reject(RejectReason::Malformed, e.to_string()),
    };
    if !attested.verify_signature() {
        return reject(RejectReason::AttestedSignatureInvalid, "wallet signature");
    }
    let claims = attested.claims();
    if !attested.outcome() {
        return reject(RejectReason::NegativeOutcome, format!("{:?}", claims.verification_result.reason));
    }

    let root = &claims.quote.endorsement.root_cert;
    if !trusted_roots.contains(&root.fingerprint()) {
        return reject(RejectReason::UntrustedRoot, root.fingerprint().to_hex());
    }
    let qv = verify_quote(&claims.quote, root, expected_measurement, &claims.public_inputs());
    if qv != QuoteVerdict::Valid {
        return reject(RejectReason::QuoteInvalid, format!("{qv:?}"));
    }

    let original = match SdJwtVc::parse(&pkg.original_compact) {
        Ok(o) => o,
        Err(e) => return reject(RejectReason::Malformed, e.to_string()),
    };
    if pkg.full_form_commitment != claims.original_credential_digest
        || Digest::of(original.issuer_jwt().as_str().as_bytes()) != claims.issuer_jwt_digest
    {
        return reject(RejectReason::DigestMismatch, "original does not link to attested");
    }
    let sd_claims = match original.claims_unverified() {
        Ok(c) => c,
        Err(e) => return reject(RejectReason::Malformed, e.to_string()),
    };
    if original.disclosures().len() == sd_claims.sd.len()
        && credential_digest(original.compact_form().as_bytes()) != claims.original_credential_digest
    {
        return reject(RejectReason::DigestMismatch, "full form digest");
    }
    let (merged, disclosed) = match check_disclosures(&original, &sd_claims) {
        Ok(m) => m,
        Err(e) => return reject(RejectReason::DisclosureInvalid, e.to_string()),
    };

    match &pkg.event_ref {
        Some(r) => {
            if let Err(detail) = check_event(r, chain, claims, expected_measurement) {
                return reject(RejectReason::EventMismatch, detail);
            }
        }
        None if opts.allow_offchain_only => {}
        None => return reject(RejectReason::MissingEventRef, "no event ref"),
    }

    let now = clock.now();
    if !claims.fresh_at(now) {
        return reject(
            RejectReason::Stale,
            format!("verified_at {} window {} now {now}", claims.verified_at, claims.validity_window_s),
        );
    }

    RpVerdict::Accept {
        holder: claims.iss.clone(),
        issuer: sd_claims.iss,
        claims: merged,
        disclosed,
        verified_at: claims.verified_at,
        event_ref: pkg.event_ref,
    }
}

fn check_event(
    r: &EventRef,
    chain: &Chain,
    claims: &crate::attested::AttestedClaims,
    expected_measurement: &Digest,
) -> Result<(), String> {
    let event = chain.resolve(r).ok_or("event ref does not resolve")?;
    if event.event != PROOF_VERIFIED || !event.outcome {
        return Err("event is not a positive proof".into());
    }
    if event.credential_digest != claims.original_credential_digest {
        return Err("event is for another credential".into());
    }
    let statement = ProofStatement::from_attested(claims);
    if event.statement_digest != statement_digest(&statement) {
        return Err("event statement differs".into());
    }
    let contract = chain.contract(&event.contract).ok_or("event from unknown contract")?;
    if &contract.expected_measurement != expected_measurement {
        return Err("contract expects another measurement".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests;
