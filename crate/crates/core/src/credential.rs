//! SD-JWT-VC credentials: issuance, selective disclosure, verification.
//!
//! Compact form: `<issuer-jwt>~<disclosure>~...~<disclosure>~`. Each
//! disclosure is the base64url (no padding) encoding of the JSON array
//! `[salt_b64, name, value]`; its digest is SHA-256 over those encoded bytes
//! and appears base64url-encoded in the issuer payload's `_sd` array.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::clock::Clock;
use crate::digest::{canonical_json, Digest};
use crate::keys::{Jwk, KeyError};
use crate::token::{CompactToken, TokenError};

pub const SD_ALG: &str = "sha-256";
pub const SD_JWT_TYP: &str = "vc+sd-jwt";
const RESERVED: &[&str] = &["iss", "sub", "vct", "iat", "exp", "nbf", "_sd", "_sd_alg", "cnf", "status"];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CredentialError {
    #[error("invalid claim name {0:?}")]
    InvalidClaimName(String),
    #[error("salt must be exactly 16 bytes")]
    InvalidSalt,
    #[error("lifetime must be positive")]
    InvalidLifetime,
    #[error("signing key unavailable: {0}")]
    SigningKeyUnavailable(String),
    #[error("malformed credential: {0}")]
    Malformed(String),
    #[error("issuer signature does not verify")]
    SignatureInvalid,
    #[error("credential expired")]
    Expired,
    #[error("credential not yet valid")]
    NotYetValid,
    #[error("disclosure digest {0} is not committed by the issuer")]
    UnknownDisclosureDigest(String),
    #[error("disclosure {0} is present more than once")]
    DuplicateDisclosure(String),
    #[error("no disclosure named {0:?}")]
    UnknownDisclosure(String),
    #[error("unsupported _sd_alg {0:?}")]
    UnsupportedSdAlg(String),
}

impl From<TokenError> for CredentialError {
    fn from(e: TokenError) -> Self {
        match e {
            TokenError::SignatureInvalid => CredentialError::SignatureInvalid,
            TokenError::Key(KeyError::SigningKeyUnavailable(k)) => {
                CredentialError::SigningKeyUnavailable(k)
            }
            other => CredentialError::Malformed(other.to_string()),
        }
    }
}

/// One selectively disclosable claim.
#[derive(Clone, PartialEq, Eq)]
pub struct Disclosure {
    salt: [u8; 16],
    claim_name: String,
    claim_value: Value,
    encoded: String,
}

impl fmt::Debug for Disclosure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Disclosure")
            .field("claim_name", &self.claim_name)
            .field("digest", &self.digest())
            .finish()
    }
}

/// Build a disclosure from its parts. Serialization is deterministic.
pub fn make_disclosure(salt: &[u8], name: &str, value: Value) -> Result<Disclosure, CredentialError> {
    if name.is_empty() {
        return Err(CredentialError::InvalidClaimName(name.to_string()));
    }
    let salt: [u8; 16] = salt.try_into().map_err(|_| CredentialError::InvalidSalt)?;
    let array = Value::Array(vec![
        Value::String(URL_SAFE_NO_PAD.encode(salt)),
        Value::String(name.to_string()),
        value.clone(),
    ]);
    let encoded = URL_SAFE_NO_PAD.encode(canonical_json(&array));
    Ok(Disclosure {
        salt,
        claim_name: name.to_string(),
        claim_value: value,
        encoded,
    })
}

/// SHA-256 over the base64url serialization bytes.
pub fn disclosure_digest(d: &Disclosure) -> Digest {
    Digest::of(d.encoded.as_bytes())
}

impl Disclosure {
    pub fn parse(encoded: &str) -> Result<Self, CredentialError> {
        let bytes = URL_SAFE_NO_PAD
            .decode(encoded)
            .map_err(|_| CredentialError::Malformed("disclosure is not base64url".into()))?;
        let v: Value = serde_json::from_slice(&bytes)
            .map_err(|e| CredentialError::Malformed(format!("disclosure json: {e}")))?;
        let Value::Array(items) = v else {
            return Err(CredentialError::Malformed("disclosure is not an array".into()));
        };
        let [Value::String(salt_b64), Value::String(name), value] = items.as_slice() else {
            return Err(CredentialError::Malformed("disclosure is not [salt, name, value]".into()));
        };
        let salt = URL_SAFE_NO_PAD
            .decode(salt_b64)
            .map_err(|_| CredentialError::Malformed("salt is not base64url".into()))?;
        let salt: [u8; 16] = salt.as_slice().try_into().map_err(|_| CredentialError::InvalidSalt)?;
        if name.is_empty() {
            return Err(CredentialError::InvalidClaimName(String::new()));
        }
        Ok(Disclosure {
            salt,
            claim_name: name.clone(),
            claim_value: value.clone(),
            encoded: encoded.to_string(),
        })
    }

    pub fn salt(&self) -> &[u8; 16] {
        &self.salt
    }

    pub fn name(&self) -> &str {
        &self.claim_name
    }

    pub fn value(&self) -> &Value {
        &self.claim_value
    }

    pub fn encoded(&self) -> &str {
        &self.encoded
    }

    pub fn digest(&self) -> Digest {
        disclosure_digest(self)
    }

    /// The digest as it appears in `_sd`.
    pub fn sd_entry(&self) -> String {
        URL_SAFE_NO_PAD.encode(self.digest().as_bytes())
    }
}

/// Issuer-signed payload of an SD-JWT-VC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdJwtClaims {
    pub iss: String,
    pub sub: String,
    pub vct: String,
    pub iat: u64,
    pub exp: u64,
    #[serde(rename = "_sd")]
    pub sd: Vec<String>,
    #[serde(rename = "_sd_alg")]
    pub sd_alg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cnf: Option<Value>,
    #[serde(flatten)]
    pub visible: Map<String, Value>,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SdJwtVc {
    issuer_jwt: CompactToken,
    disclosures: Vec<Disclosure>,
}

impl fmt::Debug for SdJwtVc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdJwtVc")
            .field("digest", &credential_digest(self.compact_form().as_bytes()))
            .field("disclosures", &self.disclosures.len())
            .finish()
    }
}

impl SdJwtVc {
    pub fn parse(compact: &str) -> Result<Self, CredentialError> {
        let Some(body) = compact.strip_suffix('~') else {
            return Err(CredentialError::Malformed("compact form must end with '~'".into()));
        };
        let mut parts = body.split('~');
        let jwt = parts.next().unwrap_or_default();
        let issuer_jwt = CompactToken::parse(jwt)?;
        let disclosures = parts
            .map(|p| {
                if p.is_empty() {
                    Err(CredentialError::Malformed("empty disclosure segment".into()))
                } else {
                    Disclosure::parse(p)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            issuer_jwt,
            disclosures,
        })
    }

    pub fn compact_form(&self) -> String {
        let mut s = String::from(self.issuer_jwt.as_str());
        s.push('~');
        for d in &self.disclosures {
            s.push_str(d.encoded());
            s.push('~');
        }
        s
    }

    pub fn issuer_jwt(&self) -> &CompactToken {
        &self.issuer_jwt
    }

    pub fn disclosures(&self) -> &[Disclosure] {
        &self.disclosures
    }

    pub fn digest(&self) -> Digest {
        credential_digest(self.compact_form().as_bytes())
    }

    /// Issuer payload, signature not checked.
    pub fn claims_unverified(&self) -> Result<SdJwtClaims, CredentialError> {
        Ok(self.issuer_jwt.claims_unverified()?)
    }

    pub fn disclosable_names(&self) -> BTreeSet<String> {
        self.disclosures.iter().map(|d| d.claim_name.clone()).collect()
    }

    /// Replace the disclosure list. Used by tests that forge disclosures.
    pub fn with_disclosures(&self, disclosures: Vec<Disclosure>) -> Self {
        Self {
            issuer_jwt: self.issuer_jwt.clone(),
            disclosures,
        }
    }
}

/// What the issuer puts into a new credential.
#[derive(Debug, Clone, Default)]
pub struct CredentialTemplate {
    pub issuer_id: String,
    pub subject: String,
    pub vct: String,
    pub always_visible: BTreeMap<String, Value>,
    pub disclosable: BTreeMap<String, Value>,
    pub lifetime_s: u64,
    pub cnf: Option<Value>,
}

pub fn issue_sd_jwt_vc(
    issuer_key: &Jwk,
    template: &CredentialTemplate,
    clock: &dyn Clock,
    rng: &mut dyn RngCore,
) -> Result<SdJwtVc, CredentialError> {
    if !issuer_key.has_private() {
        return Err(CredentialError::SigningKeyUnavailable(issuer_key.key_id.clone()));
    }
    if template.lifetime_s == 0 {
        return Err(CredentialError::InvalidLifetime);
    }
    for name in template.always_visible.keys().chain(template.disclosable.keys()) {
        if name.is_empty() || RESERVED.contains(&name.as_str()) {
            return Err(CredentialError::InvalidClaimName(name.clone()));
        }
    }
    if let Some(dup) = template
        .disclosable
        .keys()
        .find(|k| template.always_visible.contains_key(*k))
    {
        return Err(CredentialError::InvalidClaimName(dup.clone()));
    }

    let mut disclosures = Vec::with_capacity(template.disclosable.len());
    for (name, value) in &template.disclosable {
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut salt);
        disclosures.push(make_disclosure(&salt, name, value.clone())?);
    }
    let mut sd: Vec<String> = disclosures.iter().map(Disclosure::sd_entry).collect();
    sd.sort();

    let iat = clock.now();
    let claims = SdJwtClaims {
        iss: template.issuer_id.clone(),
        sub: template.subject.clone(),
        vct: template.vct.clone(),
        iat,
        exp: iat + template.lifetime_s,
        sd,
        sd_alg: SD_ALG.to_string(),
        cnf: template.cnf.clone(),
        visible: template.always_visible.clone().into_iter().collect(),
    };
    let issuer_jwt = CompactToken::sign(issuer_key, SD_JWT_TYP, &claims, false)?;
    Ok(SdJwtVc {
        issuer_jwt,
        disclosures,
    })
}

/// Keep only the named disclosures. The issuer JWT is carried unchanged.
pub fn present(cred: &SdJwtVc, selected: &BTreeSet<String>) -> Result<SdJwtVc, CredentialError> {
    let available = cred.disclosable_names();
    if let Some(unknown) = selected.iter().find(|n| !available.contains(*n)) {
        return Err(CredentialError::UnknownDisclosure(unknown.clone()));
    }
    Ok(SdJwtVc {
        issuer_jwt: cred.issuer_jwt.clone(),
        disclosures: cred
            .disclosures
            .iter()
            .filter(|d| selected.contains(&d.claim_name))
            .cloned()
            .collect(),
    })
}

/// Claims of a credential that passed verification.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedClaims {
    pub issuer: String,
    pub subject: String,
    pub vct: String,
    pub iat: u64,
    pub exp: u64,
    /// Always-visible claims merged with disclosed ones.
    pub claims: BTreeMap<String, Value>,
    pub disclosed: BTreeSet<String>,
    /// Key that verified the issuer signature.
    pub issuer_key_fingerprint: Digest,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Tolerance applied to `iat` when the verifier's clock lags the issuer's.
    pub clock_skew_s: u64,
}

pub fn verify_sd_jwt_vc(
    cred: &SdJwtVc,
    issuer_keys: &[Jwk],
    clock: &dyn Clock,
) -> Result<VerifiedClaims, CredentialError> {
    verify_sd_jwt_vc_with(cred, issuer_keys, clock, VerifyOptions::default())
}

pub fn verify_sd_jwt_vc_with(
    cred: &SdJwtVc,
    issuer_keys: &[Jwk],
    clock: &dyn Clock,
    opts: VerifyOptions,
) -> Result<VerifiedClaims, CredentialError> {
    // Signature first, so any tampering with the payload surfaces as a
    // signature failure rather than a decode error.
    let key = cred
        .issuer_jwt
        .verify_any(issuer_keys)
        .ok_or(CredentialError::SignatureInvalid)?;
    let claims: SdJwtClaims = cred.issuer_jwt.claims_unverified()?;
    if claims.sd_alg != SD_ALG {
        return Err(CredentialError::UnsupportedSdAlg(claims.sd_alg));
    }

    let now = clock.now();
    if now + opts.clock_skew_s < claims.iat {
        return Err(CredentialError::NotYetValid);
    }
    if now >= claims.exp {
        return Err(CredentialError::Expired);
    }

    let (merged, disclosed) = check_disclosures(cred, &claims)?;

    Ok(VerifiedClaims {
        issuer: claims.iss,
        subject: claims.sub,
        vct: claims.vct,
        iat: claims.iat,
        exp: claims.exp,
        claims: merged,
        disclosed,
        issuer_key_fingerprint: key.fingerprint(),
    })
}

/// Merge visible claims with disclosures after checking each disclosure is
/// committed in `_sd` exactly once. The issuer signature is not checked.
pub fn check_disclosures(
    cred: &SdJwtVc,
    claims: &SdJwtClaims,
) -> Result<(BTreeMap<String, Value>, BTreeSet<String>), CredentialError> {
    if claims.sd_alg != SD_ALG {
        return Err(CredentialError::UnsupportedSdAlg(claims.sd_alg.clone()));
    }
    let committed: BTreeSet<&str> = claims.sd.iter().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    let mut merged: BTreeMap<String, Value> = claims
        .visible
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut disclosed = BTreeSet::new();
    for d in &cred.disclosures {
        let entry = d.sd_entry();
        if !committed.contains(entry.as_str()) {
            return Err(CredentialError::UnknownDisclosureDigest(d.digest().to_hex()));
        }
        if !seen.insert(entry) {
            return Err(CredentialError::DuplicateDisclosure(d.digest().to_hex()));
        }
        if RESERVED.contains(&d.claim_name.as_str()) || merged.contains_key(&d.claim_name) {
            return Err(CredentialError::InvalidClaimName(d.claim_name.clone()));
        }
        merged.insert(d.claim_name.clone(), d.claim_value.clone());
        disclosed.insert(d.claim_name.clone());
    }

    Ok((merged, disclosed))
}

/// SHA-256 over the exact compact-form bytes.
pub fn credential_digest(compact_form: &[u8]) -> Digest {
    Digest::of(compact_form)
}
