//! Issuer-side helpers over a federation member's key.

use std::collections::BTreeMap;

use rand::RngCore;
use serde_json::{json, Value};

use crate::clock::Clock;
use crate::credential::{issue_sd_jwt_vc, CredentialError, CredentialTemplate, SdJwtVc};
use crate::keys::Jwk;

pub const DEMO_VCT: &str = "urn:ssibridge:vct:health-card";
pub const DEFAULT_CREDENTIAL_LIFETIME_S: u64 = 180 * 24 * 3600;

/// A synthetic health-card credential. The claim set is invented for tests.
pub fn demo_template(issuer_id: &str, holder_id: &str) -> CredentialTemplate {
    let disclosable: BTreeMap<String, Value> = [
        ("given_name", json!("Ada")),
        ("family_name", json!("Lovelace")),
        ("birthdate", json!("1815-12-10")),
        ("health_card_number", json!("HC-0000-1815")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    CredentialTemplate {
        issuer_id: issuer_id.to_string(),
        subject: holder_id.to_string(),
        vct: DEMO_VCT.to_string(),
        always_visible: BTreeMap::from([("card_kind".to_string(), json!("health"))]),
        disclosable,
        lifetime_s: DEFAULT_CREDENTIAL_LIFETIME_S,
        cnf: None,
    }
}

/// Issue the demo credential with a federation member's key.
pub fn issue_demo(
    issuer_key: &Jwk,
    issuer_id: &str,
    holder_id: &str,
    clock: &dyn Clock,
    rng: &mut dyn RngCore,
) -> Result<SdJwtVc, CredentialError> {
    issue_sd_jwt_vc(issuer_key, &demo_template(issuer_id, holder_id), clock, rng)
}
