use std::sync::{Arc, RwLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::clock::ManualClock;
use crate::enclave::new_platform;
use crate::federation::mock::{serve_mock_federation, FederationHandle, FederationTopology, QEAA_PROVIDER_ID};
use crate::issuer::issue_demo;
use crate::ledger::new_chain;
use crate::proof::TRANSCRIPT_BACKEND;
use crate::testkit::NOW;
use crate::wallet::{relying_party_verify, RpOptions};

struct Fixture {
    fed: FederationHandle,
    service: Arc<VerificationService>,
    server: HttpServer,
    provider_pub: Jwk,
    root: Digest,
    service_measurement: Digest,
    verifier_measurement: Digest,
    rng: ChaCha20Rng,
    clock: Arc<ManualClock>,
}

fn fixture(seed: u64, version: &str) -> Fixture {
    let fed = serve_mock_federation(&FederationTopology::default_four(), seed).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let platform = Arc::new(new_platform(seed));
    let policy = VerificationPolicy::default();
    let verifier_workload = WorkloadDescriptor::credential_verifier(policy.clone());
    let verifier_measurement = measure_workload(&verifier_workload);
    let mut chain = new_chain(NOW - 3600);
    let contract = chain
        .deploy_verifier(TRANSCRIPT_BACKEND, vec![platform.root_fingerprint()], verifier_measurement)
        .unwrap()
        .address;
    let provider_key = Jwk::es256("provider", &mut rng);
    let clock = Arc::new(ManualClock::new(NOW));
    let service = Arc::new(VerificationService::new(ServiceConfig {
        platform: Arc::clone(&platform),
        service_workload: service_workload(version, policy.clone()),
        verifier_workload,
        provider_key: provider_key.clone(),
        federation: Arc::new(fed.clone()),
        trust: fed.trust_bundle(),
        chain: Arc::new(RwLock::new(chain)),
        contract,
        clock: clock.clone(),
        validity_window_s: 604800,
        ledger_path: None,
    }));
    let server = serve_service(Arc::clone(&service), "127.0.0.1:0").unwrap();
    Fixture {
        root: platform.root_fingerprint(),
        fed,
        service,
        server,
        provider_pub: provider_key.to_public(),
        service_measurement: measure_workload(&service_workload(SERVICE_WORKLOAD_VERSION, policy)),
        verifier_measurement,
        rng,
        clock,
    }
}

impl Fixture {
    fn nonce(&mut self) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        self.rng.fill_bytes(&mut n);
        n
    }

    fn credential(&mut self, holder: &str) -> SdJwtVc {
        let key = self.fed.entity_key(QEAA_PROVIDER_ID).unwrap();
        issue_demo(&key, QEAA_PROVIDER_ID, holder, &*self.clock, &mut self.rng).unwrap()
    }

    fn attest(&mut self) -> Result<ServiceHandle, ServiceError> {
        let nonce = self.nonce();
        attest_service(
            &self.server.base_url(),
            &self.provider_pub,
            &self.service_measurement,
            &self.root,
            &nonce,
        )
    }
}

#[test]
fn descriptor_measurement_is_recomputable() {
    let f = fixture(1, SERVICE_WORKLOAD_VERSION);
    let d = fetch_descriptor(&f.server.base_url()).unwrap();
    assert_eq!(d.expected_measurement, measure_workload(&d.workload));
    assert_eq!(d.expected_measurement, f.service_measurement);
    assert_eq!(d.base_endpoint, f.server.base_url());
    assert!(!d.provider_key.has_private());
}

#[test]
fn honest_service_attests_and_verifies() {
    let mut f = fixture(2, SERVICE_WORKLOAD_VERSION);
    let handle = f.attest().unwrap();
    let cred = f.credential("did:example:holder");
    let resp = handle.request_verification(&cred).unwrap();
    assert_eq!(resp.verdict.outcome, 1);

    let chain = f.service.config().chain.read().unwrap().clone();
    let e = chain.resolve(&resp.event_ref).unwrap();
    assert_eq!(e.credential_digest, cred.digest());
    assert_eq!(handle.events(&cred.digest()).unwrap(), vec![e.clone()]);

    let pkg = crate::wallet::PresentationPackage {
        attested_jwt_vc: resp.attested_jwt_vc,
        original_compact: cred.compact_form(),
        event_ref: Some(resp.event_ref),
        full_form_commitment: cred.digest(),
    };
    let v = relying_party_verify(&pkg, &chain, &[f.root], &f.verifier_measurement, &*f.clock, RpOptions::default());
    assert!(v.is_accept(), "{v:?}");
}

#[test]
fn version_bump_is_measurement_mismatch() {
    let mut f = fixture(3, "1.1");
    assert_eq!(
        f.attest().unwrap_err(),
        ServiceError::AttestationFailed(AttestationFailure::MeasurementMismatch)
    );
}

#[test]
fn replayed_attestation_is_nonce_mismatch() {
    let mut f = fixture(4, SERVICE_WORKLOAD_VERSION);
    let old = f.attest().unwrap().attestation().clone();
    let fresh = f.nonce();
    assert_eq!(
        check_attestation(&old, &f.provider_pub, &f.service_measurement, &f.root, &fresh),
        Err(AttestationFailure::NonceMismatch)
    );
    // Echoing the new nonce without a new quote does not help.
    let mut spliced = old.clone();
    spliced.nonce = fresh.to_vec();
    assert_eq!(
        check_attestation(&spliced, &f.provider_pub, &f.service_measurement, &f.root, &fresh),
        Err(AttestationFailure::NonceMismatch)
    );
}

#[test]
fn wrong_provider_or_root_fails() {
    let mut f = fixture(5, SERVICE_WORKLOAD_VERSION);
    let att = f.attest().unwrap().attestation().clone();
    let nonce: [u8; NONCE_LEN] = att.nonce.clone().try_into().unwrap();
    let other = Jwk::es256("other", &mut f.rng);
    assert_eq!(
        check_attestation(&att, &other, &f.service_measurement, &f.root, &nonce),
        Err(AttestationFailure::ProviderKeyMismatch)
    );
    assert_eq!(
        check_attestation(&att, &f.provider_pub, &f.service_measurement, &Digest::ZERO, &nonce),
        Err(AttestationFailure::UntrustedRoot)
    );
    let mut resigned = att.clone();
    resigned.provider_signature[0] ^= 1;
    assert_eq!(
        check_attestation(&resigned, &f.provider_pub, &f.service_measurement, &f.root, &nonce),
        Err(AttestationFailure::ProviderSignatureInvalid)
    );
}

#[test]
fn revoked_mark_is_structured_preflight_error() {
    let mut f = fixture(6, SERVICE_WORKLOAD_VERSION);
    let handle = f.attest().unwrap();
    let cred = f.credential("did:example:holder");
    for m in f.fed.marks_of(QEAA_PROVIDER_ID) {
        f.fed.revoke_mark(&m).unwrap();
    }
    let height = f.service.config().chain.read().unwrap().height();
    match handle.request_verification(&cred).unwrap_err() {
        ServiceError::Server(b) => {
            assert_eq!(b.code, "PreflightFailed");
            assert!(b.verdict.is_some());
        }
        e => panic!("{e:?}"),
    }
    assert_eq!(f.service.config().chain.read().unwrap().height(), height);
}

#[test]
fn attestation_precedes_credential_on_the_wire() {
    let mut f = fixture(7, SERVICE_WORKLOAD_VERSION);
    let handle = f.attest().unwrap();
    let cred = f.credential("did:example:holder");
    handle.request_verification(&cred).unwrap();
    let paths: Vec<String> = f.service.request_log().into_iter().map(|e| e.path).collect();
    assert_eq!(paths, ["/attest", "/verify"]);
}

#[test]
fn service_keeps_no_credential_bytes() {
    let mut f = fixture(8, SERVICE_WORKLOAD_VERSION);
    let handle = f.attest().unwrap();
    for i in 0..3 {
        let cred = f.credential(&format!("did:example:h{i}"));
        handle.request_verification(&cred).unwrap();
        let kept = f.service.retained_bytes();
        let compact = cred.compact_form();
        assert!(!contains(&kept, compact.as_bytes()));
        for d in cred.disclosures() {
            assert!(!contains(&kept, d.encoded().as_bytes()));
        }
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn unreachable_service() {
    let f = fixture(9, SERVICE_WORKLOAD_VERSION);
    let url = f.server.base_url();
    drop(f);
    let err = attest_service(&url, &Jwk::es256("x", &mut ChaCha20Rng::seed_from_u64(0)), &Digest::ZERO, &Digest::ZERO, &[0; 32])
        .unwrap_err();
    assert_eq!(err.code(), "Unreachable");
}

#[test]
fn concurrent_requests_are_isolated() {
    let mut f = fixture(10, SERVICE_WORKLOAD_VERSION);
    let handle = f.attest().unwrap();
    let creds: Vec<SdJwtVc> = (0..4).map(|i| f.credential(&format!("did:example:c{i}"))).collect();
    let refs: Vec<EventRef> = std::thread::scope(|s| {
        let hs: Vec<_> = creds
            .iter()
            .map(|c| {
                let h = handle.clone();
                s.spawn(move || h.request_verification(c).unwrap().event_ref)
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let chain = f.service.config().chain.read().unwrap();
    for (c, r) in creds.iter().zip(&refs) {
        assert_eq!(chain.resolve(r).unwrap().credential_digest, c.digest());
    }
}
