//! Compact signed tokens: `b64url(header).b64url(payload).b64url(sig)`.
//!
//! One parser and one signer serve credentials, entity statements and trust
//! marks. The signature always covers the ASCII signing input exactly as
//! transmitted.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::keys::{Jwk, KeyError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub alg: String,
    pub kid: String,
    pub typ: String,
    /// Signer's public key, carried only where the verifier has no other
    /// way to obtain it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jwk: Option<Jwk>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("token is not three dot-separated segments")]
    Segments,
    #[error("token segment is not base64url")]
    Base64,
    #[error("token header or payload is not the expected JSON: {0}")]
    Json(String),
    #[error("signature does not verify")]
    SignatureInvalid,
    #[error(transparent)]
    Key(#[from] KeyError),
}

/// A parsed but not yet verified compact token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactToken {
    raw: String,
    header: Header,
    payload_bytes: Vec<u8>,
    signature: Vec<u8>,
    signing_input_len: usize,
}

impl CompactToken {
    pub fn sign<P: Serialize>(
        key: &Jwk,
        typ: &str,
        payload: &P,
        embed_key: bool,
    ) -> Result<Self, TokenError> {
        if !key.has_private() {
            return Err(KeyError::SigningKeyUnavailable(key.key_id.clone()).into());
        }
        let header = Header {
            alg: key.suite_id.clone(),
            kid: key.key_id.clone(),
            typ: typ.to_string(),
            jwk: embed_key.then(|| key.to_public()),
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| TokenError::Json(e.to_string()))?;
        let payload_json = serde_json::to_vec(payload).map_err(|e| TokenError::Json(e.to_string()))?;
        let signing_input = format!(
            "{}.{}",
            URL_SAFE_NO_PAD.encode(&header_json),
            URL_SAFE_NO_PAD.encode(&payload_json)
        );
        let signature = key.sign(signing_input.as_bytes())?;
        let signing_input_len = signing_input.len();
        let raw = format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(&signature));
        Ok(Self {
            raw,
            header,
            payload_bytes: payload_json,
            signature,
            signing_input_len,
        })
    }

    pub fn parse(raw: &str) -> Result<Self, TokenError> {
        let mut parts = raw.split('.');
        let (Some(h), Some(p), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(TokenError::Segments);
        };
        let header_bytes = URL_SAFE_NO_PAD.decode(h).map_err(|_| TokenError::Base64)?;
        let payload_bytes = URL_SAFE_NO_PAD.decode(p).map_err(|_| TokenError::Base64)?;
        let signature = URL_SAFE_NO_PAD.decode(s).map_err(|_| TokenError::Base64)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| TokenError::Json(e.to_string()))?;
        Ok(Self {
            raw: raw.to_string(),
            header,
            payload_bytes,
            signature,
            signing_input_len: h.len() + 1 + p.len(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn signature(&self) -> &[u8] {
        &self.signature
    }

    pub fn payload_bytes(&self) -> &[u8] {
        &self.payload_bytes
    }

    pub fn signing_input(&self) -> &[u8] {
        &self.raw.as_bytes()[..self.signing_input_len]
    }

    /// Decode the payload without checking the signature.
    pub fn claims_unverified<T: DeserializeOwned>(&self) -> Result<T, TokenError> {
        serde_json::from_slice(&self.payload_bytes).map_err(|e| TokenError::Json(e.to_string()))
    }

    pub fn verify_with(&self, key: &Jwk) -> bool {
        key.suite_id == self.header.alg && key.verify(self.signing_input(), &self.signature)
    }

    /// Verify under the first key whose id matches the header `kid`, falling
    /// back to every key with a matching suite.
    pub fn verify_any<'k>(&self, keys: impl IntoIterator<Item = &'k Jwk>) -> Option<&'k Jwk> {
        let keys: Vec<&Jwk> = keys.into_iter().collect();
        keys.iter()
            .find(|k| k.key_id == self.header.kid && self.verify_with(k))
            .or_else(|| keys.iter().find(|k| self.verify_with(k)))
            .copied()
    }

    /// Verify and decode the payload.
    pub fn verified_claims<T: DeserializeOwned>(&self, key: &Jwk) -> Result<T, TokenError> {
        if !self.verify_with(key) {
            return Err(TokenError::SignatureInvalid);
        }
        self.claims_unverified()
    }
}

/// Flip one bit of the decoded payload or signature and re-encode. Test
/// helper for tamper properties; `bit` indexes payload bits first, then
/// signature bits.
pub fn mutate_bit(raw: &str, bit: usize) -> String {
    let mut parts: Vec<Vec<u8>> = raw
        .split('.')
        .map(|p| URL_SAFE_NO_PAD.decode(p).expect("well-formed token"))
        .collect();
    let payload_bits = parts[1].len() * 8;
    let (idx, b) = if bit < payload_bits {
        (1, bit)
    } else {
        (2, (bit - payload_bits) % (parts[2].len() * 8))
    };
    parts[idx][b / 8] ^= 1 << (b % 8);
    parts
        .iter()
        .map(|p| URL_SAFE_NO_PAD.encode(p))
        .collect::<Vec<_>>()
        .join(".")
}

pub fn total_mutable_bits(raw: &str) -> usize {
    raw.split('.')
        .skip(1)
        .map(|p| URL_SAFE_NO_PAD.decode(p).map(|b| b.len() * 8).unwrap_or(0))
        .sum()
}
