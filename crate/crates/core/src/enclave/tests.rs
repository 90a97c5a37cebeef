use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use super::*;
use crate::attested::{issue_attested_jwt_vc, AttestedError};
use crate::clock::{CountingClock, ManualClock};
use crate::federation::mock::*;
use crate::federation::{resolve_trust_chain, ReasonCode};
use crate::issuer::issue_demo;

const NOW: u64 = DEFAULT_ISSUED_AT + 7200;

struct Fixture {
    fed: FederationHandle,
    trust: TrustBundle,
    cred: SdJwtVc,
    platform: Platform,
    workload: WorkloadDescriptor,
    clock: ManualClock,
}

fn fixture() -> Fixture {
    let fed = serve_mock_federation(&FederationTopology::default_four(), 11).unwrap();
    let clock = ManualClock::new(NOW);
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let key = fed.entity_key(QEAA_PROVIDER_ID).unwrap();
    let cred = issue_demo(&key, QEAA_PROVIDER_ID, "did:example:holder", &clock, &mut rng).unwrap();
    Fixture {
        trust: fed.trust_bundle(),
        fed,
        cred,
        platform: new_platform(1),
        workload: WorkloadDescriptor::credential_verifier(VerificationPolicy::default()),
        clock,
    }
}

impl Fixture {
    fn run(&self) -> Result<(VerificationTranscript, Quote), EnclaveError> {
        let ctx = FederationContext {
            fetcher: &self.fed,
            transport: &self.fed,
            trust: &self.trust,
        };
        run_attested_verification(&self.platform, &self.workload, &self.cred, &ctx, &self.clock)
    }
}

#[test]
fn measurement_is_sha256_of_canonical_descriptor() {
    let w = WorkloadDescriptor::credential_verifier(VerificationPolicy::default());
    let m = measure_workload(&w);
    assert_eq!(m, measure_workload(&w.clone()));
    // Oracle: hash the JSON text written out by hand.
    let p = &w.policy;
    let text = format!(
        r#"{{"logic_digest":"{}","name":"{}","policy":{{"max_chain_depth":{},"max_clock_skew_s":{},"require_all_marks_active":true,"required_mark_types":["{}"]}},"version":"{}"}}"#,
        w.logic_digest, w.name, p.max_chain_depth, p.max_clock_skew_s, p.required_mark_types[0], w.version
    );
    assert_eq!(m.0.as_slice(), &Sha256::digest(text.as_bytes())[..]);
    let bumped = WorkloadDescriptor {
        version: "1.1".into(),
        ..w
    };
    assert_ne!(measure_workload(&bumped), m);
}

#[test]
fn platform_chain_and_privacy() {
    let p = new_platform(1);
    assert!(p.verify_chain());
    assert_ne!(new_platform(2).root_fingerprint(), p.root_fingerprint());
    assert_eq!(new_platform(1).root_fingerprint(), p.root_fingerprint());
    let json = serde_json::to_string(&p).unwrap();
    let private = p.attestation_key.private_material.as_ref().unwrap();
    use base64::Engine as _;
    let b64 = base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(private);
    assert!(!json.contains(&b64));
    assert!(!json.contains("private_material"));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v.as_object().unwrap().len(), 2);
}

#[test]
fn quotes_are_marked_simulated() {
    let p = new_platform(1);
    let q = p.quote(Digest::ZERO, [0; 64], 5);
    let v = serde_json::to_value(&q).unwrap();
    assert_eq!(v["simulated"], serde_json::Value::Bool(true));
    let mut forged = v.clone();
    forged["simulated"] = false.into();
    assert!(serde_json::from_value::<Quote>(forged).is_err());
    let mut missing = v;
    missing.as_object_mut().unwrap().remove("simulated");
    assert!(serde_json::from_value::<Quote>(missing).is_err());
}

#[test]
fn healthy_run_outcome_one_and_quote_verifies() {
    let f = fixture();
    let (t, q) = f.run().unwrap();
    assert!(t.outcome, "{t:?}");
    assert_eq!(t.credential_error, None);
    let inputs = t.public_inputs();
    assert_eq!(inputs.credential_digest, Digest::of(f.cred.compact_form().as_bytes()));
    assert_eq!(inputs.endpoint_cert_fingerprints.len(), 2);
    let pinned: Vec<Digest> = [QEAA_PROVIDER_ID, INTERMEDIATE_ID]
        .iter()
        .map(|e| f.trust.pinned_certs[&status_endpoint(e)])
        .collect();
    let mut expected = pinned.clone();
    expected.sort();
    assert_eq!(inputs.sorted_fingerprints(), expected);
    assert_eq!(
        verify_quote(&q, f.platform.root_cert(), &measure_workload(&f.workload), &inputs),
        QuoteVerdict::Valid
    );
    assert_eq!(t.digest(), f.run().unwrap().0.digest());
    assert_eq!(f.platform.runs(), 2);
}

#[test]
fn revoked_mark_attests_negative_result() {
    let f = fixture();
    f.fed.revoke_mark(&mark_id(QEAA_PROVIDER_ID, QEAA_MARK_TYPE)).unwrap();
    let (t, q) = f.run().unwrap();
    assert!(!t.outcome);
    assert_eq!(t.chain_verdict.reason(), Some(ReasonCode::MarkRevoked));
    let inputs = t.public_inputs();
    assert_eq!(
        verify_quote(&q, f.platform.root_cert(), &measure_workload(&f.workload), &inputs),
        QuoteVerdict::Valid
    );
    let flipped = PublicInputs { outcome: true, ..inputs };
    assert_eq!(
        verify_quote(&q, f.platform.root_cert(), &measure_workload(&f.workload), &flipped),
        QuoteVerdict::InputsMismatch
    );
}

#[test]
fn swapped_certs_are_transport_compromise() {
    let f = fixture();
    f.fed.swap_certs(QEAA_PROVIDER_ID, WALLET_PROVIDER_ID).unwrap();
    match f.run() {
        Err(EnclaveError::TransportCompromised { endpoint, .. }) => {
            assert_eq!(endpoint, status_endpoint(QEAA_PROVIDER_ID))
        }
        other => panic!("expected TransportCompromised, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_outcome_zero_not_compromise() {
    let f = fixture();
    f.fed.inject_outage(INTERMEDIATE_ID).unwrap();
    let (t, _) = f.run().unwrap();
    assert!(!t.outcome);
    assert_eq!(t.chain_verdict.reason(), Some(ReasonCode::MarkUnreachable));
    assert_eq!(t.public_inputs().endpoint_cert_fingerprints.len(), 1);
}

#[test]
fn expired_credential_is_outcome_zero() {
    let f = fixture();
    f.clock.advance(crate::issuer::DEFAULT_CREDENTIAL_LIFETIME_S);
    let (t, _) = f.run().unwrap();
    assert!(t.chain_verdict.is_valid());
    assert!(!t.outcome);
    assert!(t.credential_error.unwrap().contains("expired"));
}

#[test]
fn verify_quote_failure_modes() {
    let f = fixture();
    let (t, q) = f.run().unwrap();
    let inputs = t.public_inputs();
    let m = measure_workload(&f.workload);
    let other = new_platform(2);
    assert_eq!(verify_quote(&q, other.root_cert(), &m, &inputs), QuoteVerdict::RootMismatch);
    let bumped = measure_workload(&WorkloadDescriptor {
        version: "1.1".into(),
        ..f.workload.clone()
    });
    assert_eq!(
        verify_quote(&q, f.platform.root_cert(), &bumped, &inputs),
        QuoteVerdict::MeasurementMismatch
    );
    let mut bad = q.clone();
    bad.timestamp += 1;
    assert_eq!(verify_quote(&bad, f.platform.root_cert(), &m, &inputs), QuoteVerdict::BadSignature);
    // A quote from another platform re-labelled with this root.
    let mut grafted = other.quote(q.measurement, inputs.report_data(), q.timestamp);
    grafted.endorsement.root_cert = f.platform.root_cert().clone();
    assert_eq!(
        verify_quote(&grafted, f.platform.root_cert(), &m, &inputs),
        QuoteVerdict::BadSignature
    );
}

#[test]
fn report_data_layout() {
    let inputs = PublicInputs {
        credential_digest: Digest([1; 32]),
        anchor_key_fingerprint: Digest([2; 32]),
        endpoint_cert_fingerprints: vec![Digest([9; 32]), Digest([3; 32]), Digest([9; 32])],
        measurement: Digest([4; 32]),
        policy_digest: Digest([5; 32]),
        verified_at: 0x0102030405060708,
        outcome: true,
    };
    // Oracle built byte by byte from the documented layout.
    let mut oracle = Vec::new();
    for b in [1u8, 2] {
        oracle.extend_from_slice(&[0, 0, 0, 32]);
        oracle.extend_from_slice(&[b; 32]);
    }
    oracle.extend_from_slice(&[0, 0, 0, 68, 0, 0, 0, 2]);
    oracle.extend_from_slice(&[3; 32]);
    oracle.extend_from_slice(&[9; 32]);
    for b in [4u8, 5] {
        oracle.extend_from_slice(&[0, 0, 0, 32]);
        oracle.extend_from_slice(&[b; 32]);
    }
    oracle.extend_from_slice(&[0, 0, 0, 8, 1, 2, 3, 4, 5, 6, 7, 8]);
    oracle.extend_from_slice(&[0, 0, 0, 1, 1]);
    assert_eq!(inputs.encode(), oracle);
    let rd = inputs.report_data();
    assert_eq!(&rd[..32], &Sha256::digest(&oracle)[..]);
    assert_eq!(&rd[32..], &[0u8; 32]);
}

/// One mutation per public input field.
pub(crate) fn mutate_field(inputs: &PublicInputs, field: usize) -> PublicInputs {
    let mut m = inputs.clone();
    let bump = |d: &mut Digest| d.0[0] ^= 1;
    match field {
        0 => bump(&mut m.credential_digest),
        1 => bump(&mut m.anchor_key_fingerprint),
        2 => m.endpoint_cert_fingerprints.push(Digest([0xee; 32])),
        3 => bump(&mut m.measurement),
        4 => bump(&mut m.policy_digest),
        5 => m.verified_at += 1,
        6 => m.outcome = !m.outcome,
        _ => unreachable!(),
    }
    m
}

#[test]
fn every_public_input_field_is_bound() {
    let f = fixture();
    let (t, q) = f.run().unwrap();
    let inputs = t.public_inputs();
    let m = measure_workload(&f.workload);
    for field in 0..7 {
        let mutated = mutate_field(&inputs, field);
        let verdict = verify_quote(&q, f.platform.root_cert(), &mutated.measurement, &mutated);
        assert_ne!(verdict, QuoteVerdict::Valid, "field {field}");
    }
    assert_eq!(verify_quote(&q, f.platform.root_cert(), &m, &inputs), QuoteVerdict::Valid);
}

#[test]
fn run_reads_only_its_parameters() {
    let f = fixture();
    let counting = CountingFederation::new(f.fed.clone());
    let clock = CountingClock::new(ManualClock::new(NOW));
    let ctx = FederationContext {
        fetcher: &counting,
        transport: &counting,
        trust: &f.trust,
    };
    let (t, _) = run_attested_verification(&f.platform, &f.workload, &f.cred, &ctx, &clock).unwrap();
    assert!(t.outcome);
    // 5 statements fetched for the 3-entity chain, 2 marks queried.
    assert_eq!(counting.fetches(), 5);
    assert_eq!(counting.status_queries(), 2);
    assert_eq!(t.observations.len(), 2);
    assert!(clock.reads() > 0);
}

#[test]
fn concurrent_runs_are_independent() {
    let f = fixture();
    let expected = f.run().unwrap();
    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| assert_eq!(f.run().unwrap(), expected));
        }
    });
}

#[test]
fn attested_credential_binds_source() {
    let f = fixture();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let wallet = Jwk::es256("wallet", &mut rng);
    let (t, q) = f.run().unwrap();
    let chain = resolve_trust_chain(QEAA_PROVIDER_ID, &f.fed).unwrap();
    let preflight = crate::federation::verify_trust_chain(&chain, &f.trust.anchor_key, &f.fed, &f.clock);
    let a = issue_attested_jwt_vc(&wallet, "did:example:holder", &f.cred, &q, &t, &preflight, 604800, &f.clock).unwrap();
    assert!(a.verify_signature());
    assert_eq!(
        a.claims().original_credential_digest,
        crate::credential::credential_digest(f.cred.compact_form().as_bytes())
    );
    assert_eq!(a.claims().public_inputs().report_data(), t.public_inputs().report_data());
    assert_eq!(crate::attested::AttestedCredential::parse(a.compact()).unwrap(), a);

    let other = issue_demo(
        &f.fed.entity_key(QEAA_PROVIDER_ID).unwrap(),
        QEAA_PROVIDER_ID,
        "did:example:other",
        &f.clock,
        &mut rng,
    )
    .unwrap();
    assert_eq!(
        issue_attested_jwt_vc(&wallet, "h", &other, &q, &t, &preflight, 1, &f.clock),
        Err(AttestedError::QuoteMismatch)
    );
    let mut bad = preflight.clone();
    bad.push_fault(ReasonCode::MarkRevoked, QEAA_PROVIDER_ID);
    assert_eq!(
        issue_attested_jwt_vc(&wallet, "h", &f.cred, &q, &t, &bad, 1, &f.clock),
        Err(AttestedError::NonValidVerdict)
    );
    assert!(matches!(
        issue_attested_jwt_vc(&wallet.to_public(), "h", &f.cred, &q, &t, &preflight, 1, &f.clock),
        Err(AttestedError::SigningKeyUnavailable(_))
    ));
}
