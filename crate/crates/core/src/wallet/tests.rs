use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;

use super::*;
use crate::clock::ManualClock;
use crate::enclave::{measure_workload, FederationContext};
use crate::federation::mock::{CountingFederation, FederationHandle, QEAA_PROVIDER_ID};
use crate::federation::{StatusResponse, StatusTransport, TransportFailure};
use crate::ledger::new_chain;
use crate::proof::TRANSCRIPT_BACKEND;
use crate::testkit::{Kit, NOW};

struct Setup {
    kit: Kit,
    wallet: SsiWallet,
    chain: Chain,
    contract: String,
}

fn setup(seed: u64) -> Setup {
    let kit = Kit::new(seed);
    let wallet = SsiWallet::new(kit.wallet_key.clone(), "did:example:holder");
    let mut chain = new_chain(NOW - 3600);
    let contract = chain
        .deploy_verifier(
            TRANSCRIPT_BACKEND,
            vec![kit.platform.root_fingerprint()],
            measure_workload(&kit.workload),
        )
        .unwrap()
        .address;
    Setup {
        kit,
        wallet,
        chain,
        contract,
    }
}

impl Setup {
    fn attest(&mut self, cred: &SdJwtVc) -> Result<AttestedCredential, WalletError> {
        let ctx = FederationContext {
            fetcher: &self.kit.fed,
            transport: &self.kit.fed,
            trust: &self.kit.trust,
        };
        let enclave = EnclaveContext {
            platform: &self.kit.platform,
            workload: &self.kit.workload,
        };
        self.wallet.create_attested_credential(cred, &ctx, &enclave, &self.kit.clock)
    }

    fn published(&mut self, holder: &str) -> (String, AttestedCredential, EventRef) {
        let cred = self.kit.credential(holder);
        let a = self.attest(&cred).unwrap();
        let r = self.wallet.publish_proof(&a, &mut self.chain, &self.contract).unwrap();
        (credential_id(&cred), a, r)
    }

    fn rp(&self, pkg: &PresentationPackage, clock: &dyn Clock) -> RpVerdict {
        relying_party_verify(
            pkg,
            &self.chain,
            &[self.kit.platform.root_fingerprint()],
            &measure_workload(&self.kit.workload),
            clock,
            RpOptions::default(),
        )
    }
}

fn all(cred: &SdJwtVc) -> BTreeSet<String> {
    cred.disclosable_names()
}

#[test]
fn it_wallet_export() {
    let mut kit = Kit::new(1);
    let cred = kit.credential("did:example:holder");
    let mut it = SimItWallet::new("did:example:holder");
    it.store("pid", &cred);
    assert!(matches!(it.export_credential("pid"), Err(WalletError::NotAuthenticated)));
    it.login();
    assert_eq!(it.export_credential("pid").unwrap().compact_form(), cred.compact_form());
    assert!(matches!(it.export_credential("nope"), Err(WalletError::UnknownCredential(_))));
}

#[test]
fn healthy_attestation_has_outcome_one() {
    let mut s = setup(2);
    let cred = s.kit.credential("did:example:holder");
    let a = s.attest(&cred).unwrap();
    assert!(a.outcome());
    assert_eq!(s.kit.platform.runs(), 1);
    assert_eq!(s.wallet.attested(&credential_id(&cred)).unwrap(), &a);
}

#[test]
fn revoked_mark_fails_preflight_without_enclave_run() {
    let mut s = setup(3);
    let cred = s.kit.credential("did:example:holder");
    for m in s.kit.fed.marks_of(QEAA_PROVIDER_ID) {
        s.kit.fed.revoke_mark(&m).unwrap();
    }
    let err = s.attest(&cred).unwrap_err();
    assert_eq!(err.code(), "PreflightFailed");
    assert_eq!(s.kit.platform.runs(), 0);
}

/// Revokes every mark once `after` status queries have been answered.
struct RevokeAfter<'a> {
    fed: &'a FederationHandle,
    after: usize,
    seen: AtomicUsize,
}

impl StatusTransport for RevokeAfter<'_> {
    fn query_status(&self, endpoint: &str, body: &[u8], timeout: Duration) -> Result<StatusResponse, TransportFailure> {
        if self.seen.fetch_add(1, Ordering::SeqCst) == self.after {
            for m in self.fed.mark_ids() {
                self.fed.revoke_mark(&m).unwrap();
            }
        }
        self.fed.query_status(endpoint, body, timeout)
    }
}

#[test]
fn revocation_between_phases_yields_outcome_zero() {
    let mut s = setup(4);
    let cred = s.kit.credential("did:example:holder");

    let counting = CountingFederation::new(s.kit.fed.clone());
    let _ = crate::enclave::verify_credential(
        &cred,
        &s.kit.fed,
        &counting,
        &s.kit.trust.anchor_key,
        &s.kit.workload.policy,
        &s.kit.clock,
    );
    let preflight_queries = counting.status_queries();
    assert!(preflight_queries > 0);

    let transport = RevokeAfter {
        fed: &s.kit.fed,
        after: preflight_queries,
        seen: AtomicUsize::new(0),
    };
    let ctx = FederationContext {
        fetcher: &s.kit.fed,
        transport: &transport,
        trust: &s.kit.trust,
    };
    let enclave = EnclaveContext {
        platform: &s.kit.platform,
        workload: &s.kit.workload,
    };
    let a = s.wallet.create_attested_credential(&cred, &ctx, &enclave, &s.kit.clock).unwrap();
    assert!(!a.outcome());
    assert_eq!(s.kit.platform.runs(), 1);
}

#[test]
fn swapped_certs_surface_as_transport_compromise() {
    let mut s = setup(5);
    let cred = s.kit.credential("did:example:holder");
    let ids = s.kit.fed.entity_ids();
    s.kit.fed.swap_certs(&ids[0], &ids[1]).unwrap();
    let err = s.attest(&cred).unwrap_err();
    assert_eq!(err.code(), "EnclaveTransportCompromised");
}

#[test]
fn publish_yields_resolvable_events() {
    let mut s = setup(6);
    let (_, a, r1) = s.published("did:example:holder");
    let e = s.chain.resolve(&r1).unwrap();
    assert_eq!(e.event, PROOF_VERIFIED);
    assert_eq!(e.credential_digest, a.claims().original_credential_digest);

    let r2 = s.wallet.publish_proof(&a, &mut s.chain, &s.contract).unwrap();
    assert_ne!(r1, r2);
    assert!(s.chain.resolve(&r1).is_some() && s.chain.resolve(&r2).is_some());
}

fn tamper_verified_at(a: &AttestedCredential) -> AttestedCredential {
    let parts: Vec<&str> = a.compact().split('.').collect();
    let mut claims: serde_json::Value = serde_json::from_slice(&URL_SAFE_NO_PAD.decode(parts[1]).unwrap()).unwrap();
    let t = claims["verified_at"].as_u64().unwrap();
    claims["verified_at"] = (t + 1).into();
    let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&claims).unwrap());
    AttestedCredential::parse(&format!("{}.{}.{}", parts[0], payload, parts[2])).unwrap()
}

#[test]
fn tampered_attested_credential_is_rejected() {
    let mut s = setup(7);
    let cred = s.kit.credential("did:example:holder");
    let a = s.attest(&cred).unwrap();
    let forged = tamper_verified_at(&a);
    let err = s.wallet.publish_proof(&forged, &mut s.chain, &s.contract).unwrap_err();
    assert_eq!(err.code(), "ProofRejected");
    assert!(s.chain.get_events(&Default::default()).is_empty());
}

#[test]
fn present_requires_publication() {
    let mut s = setup(8);
    let cred = s.kit.credential("did:example:holder");
    s.attest(&cred).unwrap();
    let err = s.wallet.present(&credential_id(&cred), &all(&cred)).unwrap_err();
    assert_eq!(err.code(), "NotPublished");
}

#[test]
fn full_and_subset_presentations_accept() {
    let mut s = setup(9);
    let (id, _, r) = s.published("did:example:holder");
    let cred = s.wallet.imported(&id).unwrap().clone();

    let full = s.wallet.present(&id, &all(&cred)).unwrap();
    match s.rp(&full, &s.kit.clock) {
        RpVerdict::Accept { disclosed, event_ref, .. } => {
            assert_eq!(disclosed, all(&cred));
            assert_eq!(event_ref, Some(r));
        }
        v => panic!("{v:?}"),
    }

    let subset: BTreeSet<String> = ["given_name".to_string()].into();
    let pkg = s.wallet.present(&id, &subset).unwrap();
    match s.rp(&pkg, &s.kit.clock) {
        RpVerdict::Accept { claims, disclosed, .. } => {
            assert_eq!(disclosed, subset);
            for hidden in all(&cred).difference(&subset) {
                assert!(!claims.contains_key(hidden));
            }
            assert!(claims.contains_key("card_kind"));
        }
        v => panic!("{v:?}"),
    }
}

#[test]
fn rp_makes_no_federation_calls_and_window_is_half_open() {
    let mut s = setup(10);
    let (id, a, _) = s.published("did:example:holder");
    let cred = s.wallet.imported(&id).unwrap().clone();
    let pkg = s.wallet.present(&id, &all(&cred)).unwrap();

    let counting = CountingFederation::new(s.kit.fed.clone());
    let t1 = a.claims().verified_at;
    let w = a.claims().validity_window_s;
    let clock = ManualClock::new(t1 + w - 1);
    assert!(s.rp(&pkg, &clock).is_accept());
    clock.set(t1 + w);
    assert_eq!(s.rp(&pkg, &clock).reject_reason(), Some(RejectReason::Stale));
    assert_eq!(counting.total(), 0);
}

#[test]
fn cross_wired_event_ref_is_mismatch() {
    let mut s = setup(11);
    let (id_a, _, _) = s.published("did:example:alice");
    let (_, _, r_b) = s.published("did:example:bob");
    let cred = s.wallet.imported(&id_a).unwrap().clone();
    let mut pkg = s.wallet.present(&id_a, &all(&cred)).unwrap();
    pkg.event_ref = Some(r_b);
    assert_eq!(s.rp(&pkg, &s.kit.clock).reject_reason(), Some(RejectReason::EventMismatch));
}

#[test]
fn offchain_only_requires_override() {
    let mut s = setup(12);
    let (id, _, _) = s.published("did:example:holder");
    let cred = s.wallet.imported(&id).unwrap().clone();
    let mut pkg = s.wallet.present(&id, &all(&cred)).unwrap();
    pkg.event_ref = None;
    assert_eq!(s.rp(&pkg, &s.kit.clock).reject_reason(), Some(RejectReason::MissingEventRef));
    let v = relying_party_verify(
        &pkg,
        &s.chain,
        &[s.kit.platform.root_fingerprint()],
        &measure_workload(&s.kit.workload),
        &s.kit.clock,
        RpOptions {
            allow_offchain_only: true,
        },
    );
    assert!(v.is_accept());
}

#[test]
fn rp_rejections() {
    let mut s = setup(13);
    let (id, a, _) = s.published("did:example:holder");
    let cred = s.wallet.imported(&id).unwrap().clone();
    let pkg = s.wallet.present(&id, &all(&cred)).unwrap();

    let untrusted = relying_party_verify(
        &pkg,
        &s.chain,
        &[Digest::ZERO],
        &measure_workload(&s.kit.workload),
        &s.kit.clock,
        RpOptions::default(),
    );
    assert_eq!(untrusted.reject_reason(), Some(RejectReason::UntrustedRoot));

    let wrong_measurement = relying_party_verify(
        &pkg,
        &s.chain,
        &[s.kit.platform.root_fingerprint()],
        &Digest::ZERO,
        &s.kit.clock,
        RpOptions::default(),
    );
    assert_eq!(wrong_measurement.reject_reason(), Some(RejectReason::QuoteInvalid));

    let mut forged = pkg.clone();
    forged.attested_jwt_vc = tamper_verified_at(&a).compact().to_string();
    assert_eq!(
        s.rp(&forged, &s.kit.clock).reject_reason(),
        Some(RejectReason::AttestedSignatureInvalid)
    );

    let mut other = pkg.clone();
    other.original_compact = s.kit.credential("did:example:holder").compact_form();
    assert_eq!(s.rp(&other, &s.kit.clock).reject_reason(), Some(RejectReason::DigestMismatch));
}

#[test]
fn wallet_state_round_trips() {
    let mut s = setup(14);
    s.published("did:example:holder");
    let state = s.wallet.to_state();
    let json = serde_json::to_string(&state).unwrap();
    let back = SsiWallet::from_state(serde_json::from_str(&json).unwrap(), s.kit.wallet_key.clone()).unwrap();
    assert_eq!(back.to_state(), state);
}
