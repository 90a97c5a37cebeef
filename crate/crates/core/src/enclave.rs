//! Simulated attested execution: a measured verification workload, a
//! platform whose attestation key is endorsed by a vendor-style root, and
//! quotes binding a run's public inputs.
//!
//! Nothing here is real hardware. Every [`Quote`] carries `"simulated": true`.
//!
//! # Public inputs encoding
//!
//! Fields in this order, each written as a 4-byte big-endian length followed
//! by the field bytes:
//!
//! 1. `credential_digest` (32 bytes)
//! 2. `anchor_key_fingerprint` (32 bytes)
//! 3. endpoint cert fingerprints: 4-byte big-endian count, then each 32-byte
//!    fingerprint, sorted ascending with duplicates removed
//! 4. `measurement` (32 bytes)
//! 5. `policy_digest` (32 bytes)
//! 6. `verified_at` (8 bytes, big-endian)
//! 7. `outcome` (1 byte, 0 or 1)
//!
//! `report_data` is SHA-256 of that encoding followed by 32 zero bytes.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clock::Clock;
use crate::credential::{credential_digest, verify_sd_jwt_vc_with, CredentialError, SdJwtVc, VerifyOptions};
use crate::digest::{canonical_json, canonical_json_digest, Digest};
use crate::federation::{
    require_mark_types, resolve_trust_chain_with_depth, verify_trust_chain, ChainVerdict, EntityFetcher,
    StatusResult, StatusTransport, TrustBundle,
};
use crate::keys::{b64_bytes, Jwk};

pub const WORKLOAD_NAME: &str = "ssibridge-credential-verifier";
pub const WORKLOAD_VERSION: &str = "1.0";

/// Canonical description of what the verification workload does. Its digest
/// is the workload's `logic_digest`.
pub const WORKLOAD_LOGIC: &str = "resolve issuer trust chain to pinned anchor; \
verify every statement signature and validity period; query every trust mark status endpoint once; \
check endpoint certificates against pinned fingerprints; verify sd-jwt-vc signature, validity and disclosures; \
bind public inputs into report data";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    pub required_mark_types: Vec<String>,
    pub max_chain_depth: u32,
    pub max_clock_skew_s: u64,
    pub require_all_marks_active: bool,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        Self {
            required_mark_types: vec![crate::federation::mock::QEAA_MARK_TYPE.into()],
            max_chain_depth: crate::federation::DEFAULT_MAX_DEPTH as u32,
            max_clock_skew_s: 60,
            require_all_marks_active: true,
        }
    }
}

impl VerificationPolicy {
    pub fn digest(&self) -> Digest {
        canonical_json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadDescriptor {
    pub name: String,
    pub version: String,
    pub logic_digest: Digest,
    pub policy: VerificationPolicy,
}

impl WorkloadDescriptor {
    pub fn credential_verifier(policy: VerificationPolicy) -> Self {
        Self {
            name: WORKLOAD_NAME.into(),
            version: WORKLOAD_VERSION.into(),
            logic_digest: Digest::of(WORKLOAD_LOGIC.as_bytes()),
            policy,
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self)
    }
}

pub fn measure_workload(w: &WorkloadDescriptor) -> Digest {
    Digest::of(&w.canonical_bytes())
}

/// A simulated endorsement certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cert {
    pub subject: String,
    pub issuer: String,
    pub public_key: Jwk,
    #[serde(with = "b64_bytes")]
    pub signature: Vec<u8>,
}

#[derive(Serialize)]
struct CertTbs<'a> {
    subject: &'a str,
    issuer: &'a str,
    public_key: &'a Jwk,
}

impl Cert {
    fn issue(subject: &str, subject_key: &Jwk, issuer: &str, issuer_key: &Jwk) -> Self {
        let public_key = subject_key.to_public();
        let tbs = canonical_json(&CertTbs {
            subject,
            issuer,
            public_key: &public_key,
        });
        Self {
            subject: subject.into(),
            issuer: issuer.into(),
            public_key,
            signature: issuer_key.sign(&tbs).expect("issuer key has private half"),
        }
    }

    pub fn tbs_bytes(&self) -> Vec<u8> {
        canonical_json(&CertTbs {
            subject: &self.subject,
            issuer: &self.issuer,
            public_key: &self.public_key,
        })
    }

    pub fn verify_signed_by(&self, issuer: &Cert) -> bool {
        self.issuer == issuer.subject && issuer.public_key.verify(&self.tbs_bytes(), &self.signature)
    }

    pub fn fingerprint(&self) -> Digest {
        canonical_json_digest(self)
    }
}

/// A simulated attestation platform. The attestation private key stays
/// inside this value; serialization emits the two certificates only.
pub struct Platform {
    root_cert: Cert,
    platform_cert: Cert,
    attestation_key: Jwk,
    runs: AtomicUsize,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("root", &self.root_cert.fingerprint())
            .field("platform", &self.platform_cert.subject)
            .finish_non_exhaustive()
    }
}

impl Serialize for Platform {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Public<'a> {
            root_cert: &'a Cert,
            platform_cert: &'a Cert,
        }
        Public {
            root_cert: &self.root_cert,
            platform_cert: &self.platform_cert,
        }
        .serialize(s)
    }
}

pub fn new_platform(seed: u64) -> Platform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let root_key = Jwk::es256(format!("sim-root-{seed}"), &mut rng);
    let attestation_key = Jwk::es256(format!("sim-attest-{seed}"), &mut rng);
    let root_subject = format!("Simulated Vendor Root {seed}");
    let root_cert = Cert::issue(&root_subject, &root_key, &root_subject, &root_key);
    let platform_cert = Cert::issue(&format!("Simulated Platform {seed}"), &attestation_key, &root_subject, &root_key);
    Platform {
        root_cert,
        platform_cert,
        attestation_key,
        runs: AtomicUsize::new(0),
    }
}

impl Platform {
    pub fn root_cert(&self) -> &Cert {
        &self.root_cert
    }

    pub fn platform_cert(&self) -> &Cert {
        &self.platform_cert
    }

    pub fn root_fingerprint(&self) -> Digest {
        self.root_cert.fingerprint()
    }

    /// Number of attested runs executed on this platform.
    pub fn runs(&self) -> usize {
        self.runs.load(Ordering::SeqCst)
    }

    pub fn verify_chain(&self) -> bool {
        self.root_cert.verify_signed_by(&self.root_cert) && self.platform_cert.verify_signed_by(&self.root_cert)
    }

    /// Produce a quote over arbitrary report data.
    pub fn quote(&self, measurement: Digest, report_data: [u8; 64], timestamp: u64) -> Quote {
        let signature = self
            .attestation_key
            .sign(&quote_signing_bytes(&measurement, &report_data, timestamp))
            .expect("attestation key has private half");
        Quote {
            simulated: Simulated,
            measurement,
            report_data: report_data.to_vec(),
            timestamp,
            signature,
            endorsement: Endorsement {
                platform_cert: self.platform_cert.clone(),
                root_cert: self.root_cert.clone(),
            },
        }
    }
}

/// Always serializes as `true`; refuses anything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Simulated;

impl Serialize for Simulated {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bool(true)
    }
}

impl<'de> Deserialize<'de> for Simulated {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        if bool::deserialize(d)? {
            Ok(Simulated)
        } else {
            Err(serde::de::Error::custom("quotes are simulated"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endorsement {
    pub platform_cert: Cert,
    pub root_cert: Cert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    simulated: Simulated,
    pub measurement: Digest,
    #[serde(with = "b64_bytes")]
    pub report_data: Vec<u8>,
    pub timestamp: u64,
    #[serde(with = "b64_bytes")]
    pub signature: Vec<u8>,
    pub endorsement: Endorsement,
}

fn quote_signing_bytes(measurement: &Digest, report_data: &[u8], timestamp: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 64 + 8);
    out.extend_from_slice(measurement.as_bytes());
    out.extend_from_slice(report_data);
    out.extend_from_slice(&timestamp.to_be_bytes());
    out
}

impl Quote {
    pub fn is_simulated(&self) -> bool {
        true
    }

    pub fn root_fingerprint(&self) -> Digest {
        self.endorsement.root_cert.fingerprint()
    }

    /// Endorsement chain and signature check against the quote's own root.
    pub fn self_consistent(&self) -> bool {
        let e = &self.endorsement;
        e.root_cert.verify_signed_by(&e.root_cert)
            && e.platform_cert.verify_signed_by(&e.root_cert)
            && e.platform_cert.public_key.verify(
                &quote_signing_bytes(&self.measurement, &self.report_data, self.timestamp),
                &self.signature,
            )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicInputs {
    pub credential_digest: Digest,
    pub anchor_key_fingerprint: Digest,
    pub endpoint_cert_fingerprints: Vec<Digest>,
    pub measurement: Digest,
    pub policy_digest: Digest,
    pub verified_at: u64,
    pub outcome: bool,
}

pub(crate) fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

impl PublicInputs {
    pub fn sorted_fingerprints(&self) -> Vec<Digest> {
        let mut fps = self.endpoint_cert_fingerprints.clone();
        fps.sort();
        fps.dedup();
        fps
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_field(&mut out, self.credential_digest.as_bytes());
        put_field(&mut out, self.anchor_key_fingerprint.as_bytes());
        let fps = self.sorted_fingerprints();
        let mut list = (fps.len() as u32).to_be_bytes().to_vec();
        for fp in &fps {
            list.extend_from_slice(fp.as_bytes());
        }
        put_field(&mut out, &list);
        put_field(&mut out, self.measurement.as_bytes());
        put_field(&mut out, self.policy_digest.as_bytes());
        put_field(&mut out, &self.verified_at.to_be_bytes());
        put_field(&mut out, &[self.outcome as u8]);
        out
    }

    pub fn report_data(&self) -> [u8; 64] {
        let mut rd = [0u8; 64];
        rd[..32].copy_from_slice(Digest::of(&self.encode()).as_bytes());
        rd
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointObservation {
    pub endpoint: String,
    pub cert_fingerprint: Digest,
    pub request_digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_digest: Option<Digest>,
    pub timestamp: u64,
}

impl From<&StatusResult> for EndpointObservation {
    fn from(r: &StatusResult) -> Self {
        Self {
            endpoint: r.endpoint.clone(),
            cert_fingerprint: r.endpoint_cert_fingerprint,
            request_digest: r.request_digest,
            response_digest: r.response_digest,
            timestamp: r.queried_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationTranscript {
    pub credential_digest: Digest,
    pub anchor_key_fingerprint: Digest,
    pub observations: Vec<EndpointObservation>,
    pub chain_verdict: ChainVerdict,
    /// `None` when the credential verified; the error text otherwise.
    pub credential_error: Option<String>,
    pub policy: VerificationPolicy,
    pub measurement: Digest,
    pub started_at: u64,
    pub finished_at: u64,
    pub outcome: bool,
}

impl VerificationTranscript {
    pub fn digest(&self) -> Digest {
        canonical_json_digest(self)
    }

    pub fn public_inputs(&self) -> PublicInputs {
        PublicInputs {
            credential_digest: self.credential_digest,
            anchor_key_fingerprint: self.anchor_key_fingerprint,
            endpoint_cert_fingerprints: self
                .observations
                .iter()
                .map(|o| o.cert_fingerprint)
                .filter(|fp| *fp != Digest::ZERO)
                .collect(),
            measurement: self.measurement,
            policy_digest: self.policy.digest(),
            verified_at: self.finished_at,
            outcome: self.outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnclaveError {
    #[error("endpoint {endpoint} presented certificate {observed}, pinned {pinned:?}")]
    TransportCompromised {
        endpoint: String,
        observed: Digest,
        pinned: Option<Digest>,
    },
    #[error("policy requires all trust marks to be active")]
    UnsupportedPolicy,
}

/// The federation as seen from inside the enclave: where to fetch from and
/// what trust material was provisioned out of band.
pub struct FederationContext<'a> {
    pub fetcher: &'a dyn EntityFetcher,
    pub transport: &'a dyn StatusTransport,
    pub trust: &'a TrustBundle,
}

/// Re-run credential and chain verification under `workload.policy` and
/// quote the result. Every input arrives through the arguments.
pub fn run_attested_verification(
    platform: &Platform,
    workload: &WorkloadDescriptor,
    cred: &SdJwtVc,
    federation: &FederationContext<'_>,
    clock: &dyn Clock,
) -> Result<(VerificationTranscript, Quote), EnclaveError> {
    let policy = &workload.policy;
    if !policy.require_all_marks_active {
        return Err(EnclaveError::UnsupportedPolicy);
    }
    platform.runs.fetch_add(1, Ordering::SeqCst);
    let started_at = clock.now();
    let anchor_key = &federation.trust.anchor_key;
    let digest = credential_digest(cred.compact_form().as_bytes());

    let (chain_verdict, credential_result) = verify_credential(
        cred,
        federation.fetcher,
        federation.transport,
        anchor_key,
        policy,
        clock,
    );

    for r in chain_verdict.status_results() {
        if r.endpoint_cert_fingerprint == Digest::ZERO {
            continue;
        }
        let pinned = federation.trust.pinned_certs.get(&r.endpoint).copied();
        if pinned != Some(r.endpoint_cert_fingerprint) {
            return Err(EnclaveError::TransportCompromised {
                endpoint: r.endpoint.clone(),
                observed: r.endpoint_cert_fingerprint,
                pinned,
            });
        }
    }

    let finished_at = clock.now();
    let transcript = VerificationTranscript {
        credential_digest: digest,
        anchor_key_fingerprint: anchor_key.fingerprint(),
        observations: chain_verdict.status_results().map(EndpointObservation::from).collect(),
        outcome: chain_verdict.is_valid() && credential_result.is_ok(),
        credential_error: credential_result.err().map(|e| e.to_string()),
        chain_verdict,
        policy: policy.clone(),
        measurement: measure_workload(workload),
        started_at,
        finished_at,
    };
    let inputs = transcript.public_inputs();
    let quote = platform.quote(inputs.measurement, inputs.report_data(), inputs.verified_at);
    Ok((transcript, quote))
}

/// Resolve the issuer's chain, verify it with its marks, then verify the
/// credential under the keys the chain vouches for. Shared by the wallet's
/// out-of-enclave preflight and the attested run.
pub fn verify_credential(
    cred: &SdJwtVc,
    fetcher: &dyn EntityFetcher,
    transport: &dyn StatusTransport,
    anchor_key: &Jwk,
    policy: &VerificationPolicy,
    clock: &dyn Clock,
) -> (ChainVerdict, Result<(), CredentialError>) {
    let issuer = match cred.claims_unverified() {
        Ok(c) => c.iss,
        Err(e) => return (ChainVerdict::unresolved("", anchor_key), Err(e)),
    };
    let chain = match resolve_trust_chain_with_depth(&issuer, fetcher, policy.max_chain_depth as usize) {
        Ok(c) => c,
        Err(_) => {
            return (
                ChainVerdict::unresolved(&issuer, anchor_key),
                Err(CredentialError::SignatureInvalid),
            )
        }
    };
    let mut verdict = verify_trust_chain(&chain, anchor_key, transport, clock);
    require_mark_types(&mut verdict, &chain, &policy.required_mark_types);
    let keys = chain.vouched_keys(&issuer, anchor_key).unwrap_or_default();
    let opts = VerifyOptions {
        clock_skew_s: policy.max_clock_skew_s,
    };
    let cred_result = verify_sd_jwt_vc_with(cred, &keys, clock, opts).map(|_| ());
    (verdict, cred_result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuoteVerdict {
    Valid,
    RootMismatch,
    BadSignature,
    MeasurementMismatch,
    InputsMismatch,
}

pub fn verify_quote(
    q: &Quote,
    trusted_root: &Cert,
    expected_measurement: &Digest,
    expected_inputs: &PublicInputs,
) -> QuoteVerdict {
    verify_quote_report(q, trusted_root, expected_measurement, &expected_inputs.report_data())
}

/// Like [`verify_quote`] with the expected report data given directly.
pub fn verify_quote_report(
    q: &Quote,
    trusted_root: &Cert,
    expected_measurement: &Digest,
    expected_report_data: &[u8; 64],
) -> QuoteVerdict {
    let e = &q.endorsement;
    if e.root_cert.fingerprint() != trusted_root.fingerprint() || !trusted_root.verify_signed_by(trusted_root) {
        return QuoteVerdict::RootMismatch;
    }
    if !e.platform_cert.verify_signed_by(trusted_root) {
        return QuoteVerdict::BadSignature;
    }
    let signed = quote_signing_bytes(&q.measurement, &q.report_data, q.timestamp);
    if !e.platform_cert.public_key.verify(&signed, &q.signature) {
        return QuoteVerdict::BadSignature;
    }
    if &q.measurement != expected_measurement {
        return QuoteVerdict::MeasurementMismatch;
    }
    if q.report_data.as_slice() != expected_report_data.as_slice() {
        return QuoteVerdict::InputsMismatch;
    }
    QuoteVerdict::Valid
}

#[cfg(test)]
mod tests;
