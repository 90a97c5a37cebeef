//! Python bindings. Structured values cross the boundary as JSON strings.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use ssibridge_core::clock::ManualClock;
use ssibridge_core::credential::SdJwtVc;
use ssibridge_core::digest::Digest;
use ssibridge_core::enclave::{measure_workload, new_platform, FederationContext, Platform, VerificationPolicy, WorkloadDescriptor};
use ssibridge_core::federation::mock::{serve_mock_federation, FederationHandle, FederationTopology};
use ssibridge_core::issuer::issue_demo;
use ssibridge_core::keys::Jwk;
use ssibridge_core::ledger::{new_chain, Chain, EventFilter};
use ssibridge_core::proof::TRANSCRIPT_BACKEND;
use ssibridge_core::scenario::{run_scenario as run_core_scenario, ScenarioConfig, SCENARIO_START};
use ssibridge_core::wallet::{relying_party_verify, EnclaveContext, PresentationPackage, RpOptions, SsiWallet};

create_exception!(ssibridge, SsibridgeError, PyException);

fn err(code: &str, e: impl std::fmt::Display) -> PyErr {
    SsibridgeError::new_err(format!("{code}: {e}"))
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| err("InvalidJson", e))
}

fn digest(hex: &str) -> PyResult<Digest> {
    Digest::from_hex(hex).map_err(|e| err("InvalidDigest", e))
}

fn verifier_workload() -> WorkloadDescriptor {
    WorkloadDescriptor::credential_verifier(VerificationPolicy::default())
}

/// In-process mock federation on the default four-entity topology.
#[pyclass(name = "Federation")]
struct PyFederation {
    inner: FederationHandle,
}

#[pymethods]
impl PyFederation {
    #[new]
    #[pyo3(signature = (seed = 7, topology_json = None))]
    fn new(seed: u64, topology_json: Option<&str>) -> PyResult<Self> {
        let topo = match topology_json {
            Some(t) => FederationTopology::from_json(t.as_bytes()).map_err(|e| err("InvalidTopology", e))?,
            None => FederationTopology::default_four(),
        };
        let inner = serve_mock_federation(&topo, seed).map_err(|e| err("FederationError", e))?;
        Ok(Self { inner })
    }

    fn entity_ids(&self) -> Vec<String> {
        self.inner.entity_ids()
    }

    fn marks_of(&self, entity_id: &str) -> Vec<String> {
        self.inner.marks_of(entity_id)
    }

    fn trust_bundle_json(&self) -> PyResult<String> {
        to_json(&self.inner.trust_bundle())
    }

    fn revoke(&self, mark_id: &str) -> PyResult<()> {
        self.inner.revoke_mark(mark_id).map_err(|e| err("FederationError", e))
    }

    fn outage(&self, entity_id: &str) -> PyResult<()> {
        self.inner.inject_outage(entity_id).map_err(|e| err("FederationError", e))
    }

    fn restore(&self, entity_id: &str) -> PyResult<()> {
        self.inner.restore(entity_id).map_err(|e| err("FederationError", e))
    }

    /// Returns the new public key as JSON.
    fn rotate(&self, entity_id: &str) -> PyResult<String> {
        to_json(&self.inner.rotate_key(entity_id).map_err(|e| err("FederationError", e))?)
    }

    #[pyo3(signature = (issuer_id, holder_id, now = SCENARIO_START, seed = 7))]
    fn issue_demo(&self, issuer_id: &str, holder_id: &str, now: u64, seed: u64) -> PyResult<PyCredential> {
        let key = self.inner.entity_key(issuer_id).map_err(|e| err("FederationError", e))?;
        let cred = issue_demo(
            &key,
            issuer_id,
            holder_id,
            &ManualClock::new(now),
            &mut ChaCha20Rng::seed_from_u64(seed),
        )
        .map_err(|e| err("CredentialError", e))?;
        Ok(PyCredential { inner: cred })
    }
}

#[pyclass(name = "Credential", skip_from_py_object)]
#[derive(Clone)]
struct PyCredential {
    inner: SdJwtVc,
}

#[pymethods]
impl PyCredential {
    #[staticmethod]
    fn parse(compact: &str) -> PyResult<Self> {
        SdJwtVc::parse(compact)
            .map(|inner| Self { inner })
            .map_err(|e| err("CredentialError", e))
    }

    fn compact(&self) -> String {
        self.inner.compact_form()
    }

    fn digest(&self) -> String {
        self.inner.digest().to_hex()
    }

    fn disclosable_names(&self) -> Vec<String> {
        self.inner.disclosable_names().into_iter().collect()
    }

    fn __repr__(&self) -> String {
        format!("Credential(digest={})", self.inner.digest())
    }
}

/// Simulated attestation platform.
#[pyclass(name = "Platform")]
struct PyPlatform {
    inner: Platform,
}

#[pymethods]
impl PyPlatform {
    #[new]
    #[pyo3(signature = (seed = 7))]
    fn new(seed: u64) -> Self {
        Self {
            inner: new_platform(seed),
        }
    }

    fn root_fingerprint(&self) -> String {
        self.inner.root_fingerprint().to_hex()
    }

    fn runs(&self) -> usize {
        self.inner.runs()
    }

    /// Measurement of the default credential-verifier workload.
    #[staticmethod]
    fn verifier_measurement() -> String {
        measure_workload(&verifier_workload()).to_hex()
    }
}

#[pyclass(name = "Chain")]
struct PyChain {
    inner: Chain,
}

#[pymethods]
impl PyChain {
    #[new]
    #[pyo3(signature = (genesis_timestamp = SCENARIO_START - 3600))]
    fn new(genesis_timestamp: u64) -> Self {
        Self {
            inner: new_chain(genesis_timestamp),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Chain::load(&path)
            .map(|inner| Self { inner })
            .map_err(|e| err("LedgerError", e))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(|e| err("LedgerError", e))
    }

    fn height(&self) -> u64 {
        self.inner.height()
    }

    fn to_jsonl(&self) -> Vec<u8> {
        self.inner.to_jsonl()
    }

    #[pyo3(signature = (trusted_root, expected_measurement, backend_id = TRANSCRIPT_BACKEND))]
    fn deploy_verifier(&mut self, trusted_root: &str, expected_measurement: &str, backend_id: &str) -> PyResult<String> {
        self.inner
            .deploy_verifier(backend_id, vec![digest(trusted_root)?], digest(expected_measurement)?)
            .map(|c| c.address)
            .map_err(|e| err("LedgerError", e))
    }

    #[pyo3(signature = (credential_digest = None))]
    fn events_json(&self, credential_digest: Option<&str>) -> PyResult<String> {
        let filter = EventFilter {
            credential_digest: credential_digest.map(digest).transpose()?,
            ..Default::default()
        };
        to_json(&self.inner.get_events(&filter))
    }
}

#[pyclass(name = "Wallet")]
struct PyWallet {
    inner: SsiWallet,
}

#[pymethods]
impl PyWallet {
    #[new]
    #[pyo3(signature = (holder_id, seed = 7, validity_window_s = None))]
    fn new(holder_id: &str, seed: u64, validity_window_s: Option<u64>) -> Self {
        let key = Jwk::es256(format!("wallet-{seed}"), &mut ChaCha20Rng::seed_from_u64(seed));
        let mut inner = SsiWallet::new(key, holder_id);
        if let Some(w) = validity_window_s {
            inner = inner.with_window(w);
        }
        Self { inner }
    }

    fn import_credential(&mut self, cred: &PyCredential) -> String {
        self.inner.import(cred.inner.clone())
    }

    /// Preflight, attested run and issuance. Returns the attested JWT.
    #[pyo3(signature = (cred, federation, platform, now = SCENARIO_START))]
    fn attest(&mut self, cred: &PyCredential, federation: &PyFederation, platform: &PyPlatform, now: u64) -> PyResult<String> {
        let trust = federation.inner.trust_bundle();
        let workload = verifier_workload();
        let attested = self
            .inner
            .create_attested_credential(
                &cred.inner,
                &FederationContext {
                    fetcher: &federation.inner,
                    transport: &federation.inner,
                    trust: &trust,
                },
                &EnclaveContext {
                    platform: &platform.inner,
                    workload: &workload,
                },
                &ManualClock::new(now),
            )
            .map_err(|e| err(e.code(), e))?;
        Ok(attested.compact().to_string())
    }

    /// Returns the event reference as JSON.
    fn publish(&mut self, cred_id: &str, mut chain: PyRefMut<'_, PyChain>, contract: &str) -> PyResult<String> {
        let attested = self
            .inner
            .attested(cred_id)
            .cloned()
            .ok_or_else(|| err("UnknownCredential", cred_id))?;
        let r = self
            .inner
            .publish_proof(&attested, &mut chain.inner, contract)
            .map_err(|e| err(e.code(), e))?;
        to_json(&r)
    }

    /// Presentation package as JSON; all claims when `claims` is None.
    #[pyo3(signature = (cred_id, claims = None))]
    fn present(&self, cred_id: &str, claims: Option<Vec<String>>) -> PyResult<String> {
        let selected: BTreeSet<String> = match claims {
            Some(c) => c.into_iter().collect(),
            None => self
                .inner
                .imported(cred_id)
                .ok_or_else(|| err("UnknownCredential", cred_id))?
                .disclosable_names(),
        };
        to_json(&self.inner.present(cred_id, &selected).map_err(|e| err(e.code(), e))?)
    }

    fn state_json(&self) -> PyResult<String> {
        to_json(&self.inner.to_state())
    }
}

/// Relying-party check of a package. Returns the verdict as JSON.
#[pyfunction]
#[pyo3(signature = (package_json, chain, trusted_root, expected_measurement, now = SCENARIO_START, allow_offchain_only = false))]
fn rp_verify(
    package_json: &str,
    chain: &PyChain,
    trusted_root: &str,
    expected_measurement: &str,
    now: u64,
    allow_offchain_only: bool,
) -> PyResult<String> {
    let pkg: PresentationPackage = serde_json::from_str(package_json).map_err(|e| err("InvalidJson", e))?;
    let v = relying_party_verify(
        &pkg,
        &chain.inner,
        &[digest(trusted_root)?],
        &digest(expected_measurement)?,
        &ManualClock::new(now),
        RpOptions { allow_offchain_only },
    );
    to_json(&v)
}

/// Run a named scenario. Returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (name, seed = 7, ledger_path = None))]
fn run_scenario(name: &str, seed: u64, ledger_path: Option<PathBuf>) -> PyResult<String> {
    let cfg = ScenarioConfig {
        seed,
        ledger_path,
        ..ScenarioConfig::default()
    };
    to_json(&run_core_scenario(name, &cfg).map_err(|e| err("ScenarioError", e))?)
}

#[pymodule]
fn ssibridge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SsibridgeError", m.py().get_type::<SsibridgeError>())?;
    m.add("SCENARIO_START", SCENARIO_START)?;
    m.add_class::<PyFederation>()?;
    m.add_class::<PyCredential>()?;
    m.add_class::<PyPlatform>()?;
    m.add_class::<PyChain>()?;
    m.add_class::<PyWallet>()?;
    m.add_function(wrap_pyfunction!(rp_verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
