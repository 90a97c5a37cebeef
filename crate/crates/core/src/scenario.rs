//! End-to-end runs of the issuance, publication, service and outage flows.
//! Every run is a pure function of its [`ScenarioConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attested::AttestedCredential;
use crate::clock::{Clock, ManualClock};
use crate::credential::SdJwtVc;
use crate::digest::Digest;
use crate::enclave::{
    measure_workload, new_platform, verify_quote, FederationContext, Platform, QuoteVerdict, VerificationPolicy,
    WorkloadDescriptor,
};
use crate::federation::mock::{
    serve_mock_federation, status_endpoint, CountingFederation, FederationHandle, FederationTopology, MockError,
    DEFAULT_ISSUED_AT, QEAA_MARK_TYPE,
};
use crate::federation::TrustBundle;
use crate::issuer::issue_demo;
use crate::keys::Jwk;
use crate::ledger::{new_chain, rebuild_index, Chain, EventFilter, EventRef, PROOF_VERIFIED};
use crate::proof::TRANSCRIPT_BACKEND;
use crate::service::{
    attest_service, serve_service, service_workload, AttestationFailure, ServiceConfig, ServiceError,
    VerificationService, NONCE_LEN, SERVICE_WORKLOAD_VERSION,
};
use crate::wallet::{
    credential_id, credential_id_of, relying_party_verify, EnclaveContext, PresentationPackage, RejectReason, RpOptions, RpVerdict,
    SimItWallet, SsiWallet, WalletError, DEFAULT_VALIDITY_WINDOW_S,
};

pub const SCENARIOS: [&str; 4] = ["fig3", "fig4", "fig5", "outage"];
pub const HOLDER_ID: &str = "did:example:holder";
/// Scenario time starts two hours after the federation's statements.
pub const SCENARIO_START: u64 = DEFAULT_ISSUED_AT + 7200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub topology: FederationTopology,
    pub seed: u64,
    pub validity_window_s: u64,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger_path: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            topology: FederationTopology::default_four(),
            seed: 7,
            validity_window_s: DEFAULT_VALIDITY_WINDOW_S,
            backend_id: TRANSCRIPT_BACKEND.into(),
            ledger_path: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error(transparent)]
    Federation(#[from] MockError),
    #[error("topology has no entity holding a {QEAA_MARK_TYPE} mark")]
    NoIssuer,
    #[error(transparent)]
    Wallet(#[from] WalletError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Ledger(#[from] crate::ledger::LedgerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub artifacts: BTreeMap<String, Value>,
    /// The run's ledger as JSONL.
    #[serde(skip)]
    pub ledger: Vec<u8>,
}

impl ScenarioReport {
    fn new(scenario: &str, seed: u64) -> Self {
        Self {
            scenario: scenario.into(),
            seed,
            checks: vec![],
            artifacts: BTreeMap::new(),
            ledger: vec![],
        }
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn record(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    fn artifact(&mut self, key: &str, v: impl Serialize) {
        self.artifacts.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn finish(mut self, chain: &Chain, cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        self.ledger = chain.to_jsonl();
        self.artifact("ledger_digest", Digest::of(&self.ledger));
        if let Some(p) = &cfg.ledger_path {
            std::fs::write(p, &self.ledger)?;
        }
        Ok(self)
    }
}

pub fn run_scenario(name: &str, cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    match name {
        "fig3" => fig3(cfg),
        "fig4" => fig4(cfg),
        "fig5" => fig5(cfg),
        "outage" => outage(cfg),
        other => Err(ScenarioError::UnknownScenario(other.into())),
    }
}

/// Everything one holder-side run touches.
struct World {
    fed: FederationHandle,
    trust: TrustBundle,
    issuer_id: String,
    platform: Platform,
    workload: WorkloadDescriptor,
    clock: ManualClock,
    rng: ChaCha20Rng,
    it_wallet: SimItWallet,
    wallet: SsiWallet,
    chain: Chain,
}

impl World {
    fn new(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        let fed = serve_mock_federation(&cfg.topology, cfg.seed)?;
        let issuer_id = cfg
            .topology
            .entities
            .iter()
            .find(|e| e.marks.iter().any(|m| m == QEAA_MARK_TYPE))
            .ok_or(ScenarioError::NoIssuer)?
            .id
            .clone();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let wallet_key = Jwk::es256("wallet", &mut rng);
        Ok(Self {
            trust: fed.trust_bundle(),
            fed,
            issuer_id,
            platform: new_platform(cfg.seed),
            workload: WorkloadDescriptor::credential_verifier(VerificationPolicy::default()),
            clock: ManualClock::new(SCENARIO_START),
            rng,
            it_wallet: SimItWallet::new(HOLDER_ID),
            wallet: SsiWallet::new(wallet_key, HOLDER_ID).with_window(cfg.validity_window_s),
            chain: new_chain(SCENARIO_START),
        })
    }

    fn issue(&mut self, holder: &str) -> SdJwtVc {
        let key = self.fed.entity_key(&self.issuer_id).expect("issuer exists");
        issue_demo(&key, &self.issuer_id, holder, &self.clock, &mut self.rng).expect("demo credential issues")
    }

    fn attest_with(
        &mut self,
        cred: &SdJwtVc,
        fed: &CountingFederation<FederationHandle>,
    ) -> Result<AttestedCredential, WalletError> {
        let ctx = FederationContext {
            fetcher: fed,
            transport: fed,
            trust: &self.trust,
        };
        let enclave = EnclaveContext {
            platform: &self.platform,
            workload: &self.workload,
        };
        self.wallet.create_attested_credential(cred, &ctx, &enclave, &self.clock)
    }

    fn attest(&mut self, cred: &SdJwtVc) -> Result<AttestedCredential, WalletError> {
        let fed = CountingFederation::new(self.fed.clone());
        self.attest_with(cred, &fed)
    }

    fn measurement(&self) -> Digest {
        measure_workload(&self.workload)
    }

    /// Status endpoints of every mark holder on the issuer's chain, with the
    /// fingerprints provisioned for them.
    fn expected_cert_fingerprints(&self, chain_entities: &[String]) -> Vec<Digest> {
        let fps: BTreeSet<Digest> = chain_entities
            .iter()
            .filter(|e| !self.fed.marks_of(e).is_empty())
            .filter_map(|e| self.trust.pinned_certs.get(&status_endpoint(e)).copied())
            .collect();
        fps.into_iter().collect()
    }

    fn rp(&self, pkg: &PresentationPackage, clock: &dyn Clock) -> RpVerdict {
        relying_party_verify(
            pkg,
            &self.chain,
            &[self.platform.root_fingerprint()],
            &self.measurement(),
            clock,
            RpOptions::default(),
        )
    }
}

/// Steps 1 to 6 of attested issuance; returns the world for later stages.
fn run_fig3(cfg: &ScenarioConfig, report: &mut ScenarioReport) -> Result<(World, AttestedCredential), ScenarioError> {
    let mut w = World::new(cfg)?;
    let issued = w.issue(HOLDER_ID);
    w.it_wallet.store("health-card", &issued);

    let denied = w.it_wallet.export_credential("health-card");
    w.it_wallet.login();
    let exported = w.it_wallet.export_credential("health-card")?;
    report.record(
        "export_requires_eid_session",
        matches!(denied, Err(WalletError::NotAuthenticated)) && exported.compact_form() == issued.compact_form(),
        "export refused before login, byte-identical after",
    );

    let attested = w.attest(&exported)?;
    let claims = attested.claims();
    let root = &claims.quote.endorsement.root_cert;
    let qv = verify_quote(&claims.quote, root, &w.measurement(), &claims.public_inputs());
    report.record(
        "quote_verifies",
        qv == QuoteVerdict::Valid && root.fingerprint() == w.platform.root_fingerprint() && attested.outcome(),
        format!("{qv:?}, outcome {}", claims.verification_result.outcome),
    );

    let mut other_digest = claims.public_inputs();
    other_digest.credential_digest = Digest::of(b"another credential");
    report.record(
        "report_data_binds_credential_digest",
        claims.original_credential_digest == exported.digest()
            && claims.quote.report_data.as_slice() == claims.public_inputs().report_data().as_slice()
            && claims.quote.report_data.as_slice() != other_digest.report_data().as_slice(),
        exported.digest().to_hex(),
    );

    let expected_fps = w.expected_cert_fingerprints(&claims.verification_result.entities);
    report.record(
        "report_data_binds_endpoint_certs",
        !expected_fps.is_empty() && claims.endpoint_cert_fingerprints == expected_fps,
        format!("{} endpoint certificates", expected_fps.len()),
    );

    let runs_before = w.platform.runs();
    let revoked = w.fed.marks_of(&w.issuer_id);
    for m in &revoked {
        w.fed.set_mark_mode(m, crate::federation::mock::MarkMode::Revoked)?;
    }
    let second = w.issue("did:example:second-holder");
    let refused = w.attest(&second);
    let runs_after = w.platform.runs();
    w.fed.restore(&w.issuer_id.clone())?;
    report.record(
        "preflight_before_enclave",
        matches!(refused, Err(WalletError::PreflightFailed { .. })) && runs_after == runs_before,
        format!("enclave runs during refused issuance: {}", runs_after - runs_before),
    );

    report.artifact("credential_id", credential_id(&exported));
    report.artifact("credential_digest", exported.digest());
    report.artifact("measurement", w.measurement());
    report.artifact("attested_jwt_vc", attested.compact());
    Ok((w, attested))
}

pub fn fig3(cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    let mut report = ScenarioReport::new("fig3", cfg.seed);
    let (w, _) = run_fig3(cfg, &mut report)?;
    report.finish(&w.chain, cfg)
}

fn run_fig4(
    cfg: &ScenarioConfig,
    report: &mut ScenarioReport,
) -> Result<(World, AttestedCredential, EventRef, String), ScenarioError> {
    let (mut w, attested) = run_fig3(cfg, report)?;
    let contract = w
        .chain
        .deploy_verifier(&cfg.backend_id, vec![w.platform.root_fingerprint()], w.measurement())?
        .address;
    let event_ref = w.wallet.publish_proof(&attested, &mut w.chain, &contract)?;
    let digest = attested.claims().original_credential_digest;

    let events = w.chain.get_events(&EventFilter::default());
    let resolved = w.chain.resolve(&event_ref);
    report.record(
        "single_proof_verified_event",
        events.len() == 1
            && events[0].event == PROOF_VERIFIED
            && events[0].credential_digest == digest
            && resolved == Some(&events[0]),
        format!("{} events", events.len()),
    );
    report.record(
        "rebuilt_index_matches_live",
        rebuild_index(&w.chain) == *w.chain.live_index() && w.chain.live_index().lookup(&digest) == vec![event_ref],
        "index rebuilt from blocks",
    );
    let reloaded = Chain::from_jsonl(&w.chain.to_jsonl())?;
    report.record(
        "reloaded_chain_same_index",
        rebuild_index(&reloaded) == *w.chain.live_index() && reloaded == w.chain,
        format!("height {}", reloaded.height()),
    );
    report.artifact("contract", &contract);
    report.artifact("event_ref", event_ref);
    Ok((w, attested, event_ref, contract))
}

pub fn fig4(cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    let mut report = ScenarioReport::new("fig4", cfg.seed);
    let (w, ..) = run_fig4(cfg, &mut report)?;
    report.finish(&w.chain, cfg)
}

pub fn fig5(cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    let mut report = ScenarioReport::new("fig5", cfg.seed);
    let mut w = World::new(cfg)?;
    let platform = Arc::new(new_platform(cfg.seed));
    let contract = w
        .chain
        .deploy_verifier(&cfg.backend_id, vec![platform.root_fingerprint()], w.measurement())?
        .address;
    let chain = Arc::new(RwLock::new(w.chain.clone()));
    let provider_key = Jwk::es256("provider", &mut w.rng);
    let clock = Arc::new(ManualClock::new(w.clock.now()));
    let policy = w.workload.policy.clone();
    let (fed, trust, verifier_workload) = (w.fed.clone(), w.trust.clone(), w.workload.clone());
    let service_for = |version: &str| {
        Arc::new(VerificationService::new(ServiceConfig {
            platform: Arc::clone(&platform),
            service_workload: service_workload(version, policy.clone()),
            verifier_workload: verifier_workload.clone(),
            provider_key: provider_key.clone(),
            federation: Arc::new(fed.clone()),
            trust: trust.clone(),
            chain: Arc::clone(&chain),
            contract: contract.clone(),
            clock: clock.clone(),
            validity_window_s: cfg.validity_window_s,
            ledger_path: None,
        }))
    };
    // Published out of band; the client never takes it from the service.
    let expected = measure_workload(&service_workload(SERVICE_WORKLOAD_VERSION, policy.clone()));
    let provider_pub = provider_key.to_public();
    let root = platform.root_fingerprint();

    let honest = serve_service(service_for(SERVICE_WORKLOAD_VERSION), "127.0.0.1:0")?;
    let mut nonce = [0u8; NONCE_LEN];
    w.rng.fill_bytes(&mut nonce);
    let handle = attest_service(&honest.base_url(), &provider_pub, &expected, &root, &nonce);
    report.record(
        "service_attests",
        handle.is_ok(),
        handle.as_ref().err().map(|e| e.to_string()).unwrap_or_else(|| "measurement matched".into()),
    );
    let handle = handle?;

    let cred = w.issue(HOLDER_ID);
    w.it_wallet.store("health-card", &cred);
    w.it_wallet.login();
    let exported = w.it_wallet.export_credential("health-card")?;
    let resp = handle.request_verification(&exported)?;
    drop(honest);

    let snapshot = chain.read().unwrap().clone();
    let pkg = PresentationPackage {
        attested_jwt_vc: resp.attested_jwt_vc.clone(),
        original_compact: exported.compact_form(),
        event_ref: Some(resp.event_ref),
        full_form_commitment: exported.digest(),
    };
    let verdict = relying_party_verify(&pkg, &snapshot, &[root], &w.measurement(), &w.clock, RpOptions::default());
    report.record(
        "relying_party_accepts",
        verdict.is_accept(),
        serde_json::to_string(&verdict).unwrap_or_default(),
    );

    let bumped = serve_service(service_for("1.1"), "127.0.0.1:0")?;
    w.rng.fill_bytes(&mut nonce);
    let refused = attest_service(&bumped.base_url(), &provider_pub, &expected, &root, &nonce);
    report.record(
        "version_bump_measurement_mismatch",
        matches!(
            refused,
            Err(ServiceError::AttestationFailed(AttestationFailure::MeasurementMismatch))
        ),
        refused.err().map(|e| e.to_string()).unwrap_or_else(|| "attested".into()),
    );

    report.artifact("event_ref", resp.event_ref);
    report.artifact("attested_jwt_vc", &resp.attested_jwt_vc);
    report.artifact("service_measurement", expected);
    report.finish(&snapshot, cfg)
}

pub fn outage(cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    let mut report = ScenarioReport::new("outage", cfg.seed);
    let (mut w, attested, _, _) = run_fig4(cfg, &mut report)?;
    let id = credential_id_of(&attested.claims().original_credential_digest);
    let all = w.wallet.imported(&id).expect("imported").disclosable_names();
    let pkg = w.wallet.present(&id, &all)?;

    let holders: Vec<String> = w
        .fed
        .entity_ids()
        .into_iter()
        .filter(|e| !w.fed.marks_of(e).is_empty())
        .collect();
    for e in &holders {
        w.fed.inject_outage(e)?;
    }

    let counting = CountingFederation::new(w.fed.clone());
    let fresh = w.issue("did:example:late-holder");
    let refused = w.attest_with(&fresh, &counting);
    report.record(
        "fresh_attestation_fails",
        matches!(refused, Err(WalletError::PreflightFailed { .. })),
        refused.err().map(|e| e.code().to_string()).unwrap_or_else(|| "attested".into()),
    );

    let calls_before = counting.total();
    let accepted = w.rp(&pkg, &w.clock);
    let calls = counting.total() - calls_before;
    report.record(
        "published_package_accepted_offline",
        accepted.is_accept() && calls == 0,
        format!("{} federation calls", calls),
    );

    let claims = attested.claims();
    let late = ManualClock::new(claims.verified_at + claims.validity_window_s);
    let stale = w.rp(&pkg, &late);
    report.record(
        "stale_after_window",
        stale.reject_reason() == Some(RejectReason::Stale),
        format!("now {}", late.now()),
    );

    report.artifact("outage_entities", &holders);
    report.artifact("package", &pkg);
    report.artifact("verdict", json!({"fresh": accepted, "late": stale}));
    report.finish(&w.chain, cfg)
}

#[cfg(test)]
mod tests;
