//! Signature suites and JSON web keys.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::digest::{canonical_json_digest, Digest};

pub const ES256: &str = "ES256";

/// A signing algorithm usable for compact tokens and certificates.
pub trait SignatureSuite: Send + Sync {
    fn suite_id(&self) -> &'static str;
    /// Derive a private key from 32 bytes of seed material, or `None` if
    /// the bytes are not a valid scalar.
    fn private_from_seed(&self, seed: &[u8; 32]) -> Option<Vec<u8>>;
    fn public_from_private(&self, private: &[u8]) -> Option<Vec<u8>>;
    fn sign(&self, private: &[u8], msg: &[u8]) -> Option<Vec<u8>>;
    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool;
}

/// ECDSA over P-256; the message is hashed with SHA-256 before signing.
/// Signatures are deterministic (RFC 6979).
pub struct Es256;

impl SignatureSuite for Es256 {
    fn suite_id(&self) -> &'static str {
        ES256
    }

    fn private_from_seed(&self, seed: &[u8; 32]) -> Option<Vec<u8>> {
        SigningKey::from_bytes(seed.into())
            .ok()
            .map(|k| k.to_bytes().to_vec())
    }

    fn public_from_private(&self, private: &[u8]) -> Option<Vec<u8>> {
        let sk = SigningKey::from_slice(private).ok()?;
        Some(
            VerifyingKey::from(&sk)
                .to_encoded_point(false)
                .as_bytes()
                .to_vec(),
        )
    }

    fn sign(&self, private: &[u8], msg: &[u8]) -> Option<Vec<u8>> {
        let sk = SigningKey::from_slice(private).ok()?;
        let sig: Signature = sk.sign(msg);
        Some(sig.to_bytes().to_vec())
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        let Ok(vk) = VerifyingKey::from_sec1_bytes(public) else {
            return false;
        };
        let Ok(sig) = Signature::from_slice(sig) else {
            return false;
        };
        vk.verify(msg, &sig).is_ok()
    }
}

static SUITES: &[&dyn SignatureSuite] = &[&Es256];

/// Look up a registered suite by its identifier.
pub fn suite(suite_id: &str) -> Option<&'static dyn SignatureSuite> {
    SUITES.iter().copied().find(|s| s.suite_id() == suite_id)
}

pub fn registered_suites() -> impl Iterator<Item = &'static str> {
    SUITES.iter().map(|s| s.suite_id())
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("unknown signature suite {0}")]
    UnknownSuite(String),
    #[error("key {0} has no private material")]
    SigningKeyUnavailable(String),
    #[error("key material for {0} is malformed")]
    MalformedKey(String),
    #[error("key io: {0}")]
    Io(String),
}

pub(crate) mod b64_bytes {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&URL_SAFE_NO_PAD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        URL_SAFE_NO_PAD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => s.serialize_str(&URL_SAFE_NO_PAD.encode(v)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
            let s = Option::<String>::deserialize(d)?;
            s.map(|s| {
                URL_SAFE_NO_PAD
                    .decode(s.as_bytes())
                    .map_err(serde::de::Error::custom)
            })
            .transpose()
        }
    }
}


/// A key as carried in entity metadata and persisted in the key directory.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jwk {
    pub key_id: String,
    pub suite_id: String,
    #[serde(with = "b64_bytes")]
    pub public_material: Vec<u8>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "b64_bytes::opt"
    )]
    pub private_material: Option<Vec<u8>>,
}

impl fmt::Debug for Jwk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Jwk")
            .field("key_id", &self.key_id)
            .field("suite_id", &self.suite_id)
            .field("fingerprint", &self.fingerprint())
            .field("private", &self.private_material.is_some())
            .finish()
    }
}

#[derive(Serialize)]
struct Thumbprint<'a> {
    public_material: String,
    suite_id: &'a str,
}

impl Jwk {
    /// Generate a key from the given RNG. Rejection-samples until the seed
    /// is a valid scalar for the suite.
    pub fn generate(
        suite_id: &str,
        key_id: impl Into<String>,
        rng: &mut impl RngCore,
    ) -> Result<Self, KeyError> {
        let s = suite(suite_id).ok_or_else(|| KeyError::UnknownSuite(suite_id.to_string()))?;
        let key_id = key_id.into();
        loop {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            if let Some(private) = s.private_from_seed(&seed) {
                let public = s
                    .public_from_private(&private)
                    .ok_or_else(|| KeyError::MalformedKey(key_id.clone()))?;
                return Ok(Jwk {
                    key_id,
                    suite_id: suite_id.to_string(),
                    public_material: public,
                    private_material: Some(private),
                });
            }
        }
    }

    pub fn es256(key_id: impl Into<String>, rng: &mut impl RngCore) -> Self {
        Self::generate(ES256, key_id, rng).expect("ES256 is registered")
    }

    /// The same key without private material.
    pub fn to_public(&self) -> Jwk {
        Jwk {
            private_material: None,
            ..self.clone()
        }
    }

    pub fn has_private(&self) -> bool {
        self.private_material.is_some()
    }

    /// SHA-256 over the canonical JSON of the suite and public material.
    /// Independent of `key_id`.
    pub fn fingerprint(&self) -> Digest {
        canonical_json_digest(&Thumbprint {
            public_material: URL_SAFE_NO_PAD.encode(&self.public_material),
            suite_id: &self.suite_id,
        })
    }

    pub fn sign(&self, msg: &[u8]) -> Result<Vec<u8>, KeyError> {
        let s = suite(&self.suite_id).ok_or_else(|| KeyError::UnknownSuite(self.suite_id.clone()))?;
        let private = self
            .private_material
            .as_deref()
            .ok_or_else(|| KeyError::SigningKeyUnavailable(self.key_id.clone()))?;
        s.sign(private, msg)
            .ok_or_else(|| KeyError::MalformedKey(self.key_id.clone()))
    }

    pub fn verify(&self, msg: &[u8], sig: &[u8]) -> bool {
        suite(&self.suite_id)
            .map(|s| s.verify(&self.public_material, msg, sig))
            .unwrap_or(false)
    }

    /// Check that the public material is a valid point for the suite and,
    /// if present, matches the private material.
    pub fn validate(&self) -> Result<(), KeyError> {
        let s = suite(&self.suite_id).ok_or_else(|| KeyError::UnknownSuite(self.suite_id.clone()))?;
        if let Some(private) = &self.private_material {
            let derived = s
                .public_from_private(private)
                .ok_or_else(|| KeyError::MalformedKey(self.key_id.clone()))?;
            if derived != self.public_material {
                return Err(KeyError::MalformedKey(self.key_id.clone()));
            }
        } else if VerifyingKey::from_sec1_bytes(&self.public_material).is_err()
            && self.suite_id == ES256
        {
            return Err(KeyError::MalformedKey(self.key_id.clone()));
        }
        Ok(())
    }
}

/// Keys persisted as `<dir>/<key_id>.json`.
#[derive(Debug, Clone)]
pub struct KeyDirectory {
    root: PathBuf,
}

impl KeyDirectory {
    pub const ENV_VAR: &'static str = "SSIBRIDGE_KEYDIR";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key_id: &str) -> PathBuf {
        let safe: String = key_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        self.root.join(format!("{safe}.json"))
    }

    pub fn store(&self, key: &Jwk) -> Result<PathBuf, KeyError> {
        fs::create_dir_all(&self.root).map_err(|e| KeyError::Io(e.to_string()))?;
        let path = self.path_for(&key.key_id);
        let json = serde_json::to_vec_pretty(key).map_err(|e| KeyError::Io(e.to_string()))?;
        fs::write(&path, json).map_err(|e| KeyError::Io(e.to_string()))?;
        Ok(path)
    }

    pub fn load(&self, key_id: &str) -> Result<Jwk, KeyError> {
        let bytes = fs::read(self.path_for(key_id)).map_err(|e| KeyError::Io(e.to_string()))?;
        let key: Jwk = serde_json::from_slice(&bytes).map_err(|e| KeyError::Io(e.to_string()))?;
        key.validate()?;
        Ok(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_verify_and_single_bit_mutations() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let k = Jwk::es256("k1", &mut rng);
        let msg = b"entity statement".to_vec();
        let sig = k.sign(&msg).unwrap();
        assert!(k.to_public().verify(&msg, &sig));
        for bit in [0usize, 7, 100, 511] {
            let mut s = sig.clone();
            s[bit / 8] ^= 1 << (bit % 8);
            assert!(!k.verify(&msg, &s), "sig bit {bit}");
        }
        let mut m = msg.clone();
        m[3] ^= 0x10;
        assert!(!k.verify(&m, &sig));
    }

    #[test]
    fn public_key_cannot_sign() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let k = Jwk::es256("k", &mut rng).to_public();
        assert_eq!(k.sign(b"x"), Err(KeyError::SigningKeyUnavailable("k".into())));
    }

    #[test]
    fn fingerprint_ignores_key_id_and_private_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let k = Jwk::es256("a", &mut rng);
        let mut renamed = k.to_public();
        renamed.key_id = "b".into();
        assert_eq!(k.fingerprint(), renamed.fingerprint());
    }

    #[test]
    fn key_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let kd = KeyDirectory::new(dir.path());
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let k = Jwk::es256("issuer-1", &mut rng);
        let path = kd.store(&k).unwrap();
        assert!(path.ends_with("issuer-1.json"));
        assert_eq!(kd.load("issuer-1").unwrap(), k);
        let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        assert_eq!(raw["suite_id"], "ES256");
        assert!(raw["public_material"].as_str().unwrap().chars().all(|c| c != '=' && c != '+'));
    }

    #[test]
    fn unknown_suite_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        assert!(matches!(
            Jwk::generate("RS1", "x", &mut rng),
            Err(KeyError::UnknownSuite(_))
        ));
        assert_eq!(registered_suites().collect::<Vec<_>>(), vec![ES256]);
    }
}
