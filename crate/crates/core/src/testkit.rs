//! Shared fixtures for unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::attested::{issue_attested_jwt_vc, AttestedCredential};
use crate::clock::ManualClock;
use crate::credential::SdJwtVc;
use crate::enclave::*;
use crate::federation::mock::*;
use crate::federation::{resolve_trust_chain, verify_trust_chain, TrustBundle};
use crate::issuer::issue_demo;
use crate::keys::Jwk;

pub const NOW: u64 = DEFAULT_ISSUED_AT + 7200;

pub struct Kit {
    pub fed: FederationHandle,
    pub trust: TrustBundle,
    pub platform: Platform,
    pub workload: WorkloadDescriptor,
    pub clock: ManualClock,
    pub wallet_key: Jwk,
    pub rng: ChaCha20Rng,
}

impl Kit {
    pub fn new(seed: u64) -> Self {
        let fed = serve_mock_federation(&FederationTopology::default_four(), seed).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
        Kit {
            trust: fed.trust_bundle(),
            fed,
            platform: new_platform(seed),
            workload: WorkloadDescriptor::credential_verifier(VerificationPolicy::default()),
            clock: ManualClock::new(NOW),
            wallet_key: Jwk::es256("wallet", &mut rng),
            rng,
        }
    }

    pub fn credential(&mut self, holder: &str) -> SdJwtVc {
        let key = self.fed.entity_key(QEAA_PROVIDER_ID).unwrap();
        issue_demo(&key, QEAA_PROVIDER_ID, holder, &self.clock, &mut self.rng).unwrap()
    }

    pub fn run(&self, cred: &SdJwtVc) -> (VerificationTranscript, Quote) {
        let ctx = FederationContext {
            fetcher: &self.fed,
            transport: &self.fed,
            trust: &self.trust,
        };
        run_attested_verification(&self.platform, &self.workload, cred, &ctx, &self.clock).unwrap()
    }

    pub fn attested(&mut self, holder: &str) -> (SdJwtVc, AttestedCredential) {
        let cred = self.credential(holder);
        let (t, q) = self.run(&cred);
        let chain = resolve_trust_chain(QEAA_PROVIDER_ID, &self.fed).unwrap();
        let preflight = verify_trust_chain(&chain, &self.trust.anchor_key, &self.fed, &self.clock);
        let a = issue_attested_jwt_vc(&self.wallet_key, holder, &cred, &q, &t, &preflight, 604800, &self.clock)
            .unwrap();
        (cred, a)
    }
}
