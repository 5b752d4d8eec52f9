//! Opaque, tamper-evident references to producer-resident objects.
//!
//! A reference wraps the producer's data-plane address and the object key in
//! an authenticated-encryption envelope keyed by the cluster-wide
//! [`ProviderSecret`]. User code can copy references around like any other
//! string but cannot read the address out of them or forge new ones.

use std::fmt;
use std::net::SocketAddr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;

/// Header carrying an encoded reference on control-plane envelopes.
pub const REF_HEADER: &str = "x-xdt-ref";

const KEY_LEN: usize = 32;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const OBJECT_KEY_LEN: usize = 8;
// Longest textual socket address is a bracketed IPv6 with scope id and port.
const MAX_ADDR_LEN: usize = 64;
const MAX_TOKEN_LEN: usize = (NONCE_LEN + OBJECT_KEY_LEN + MAX_ADDR_LEN + TAG_LEN) * 4 / 3 + 4;

/// Symmetric key shared by provider components (SDK trusted layer, queue
/// proxies). Never place it in envelopes, logs or references.
#[derive(Clone)]
pub struct ProviderSecret {
    key: [u8; KEY_LEN],
}

impl ProviderSecret {
    pub fn generate() -> Self {
        let mut key = [0u8; KEY_LEN];
        rand::thread_rng().fill_bytes(&mut key);
        Self { key }
    }

    pub fn from_bytes(key: [u8; KEY_LEN]) -> Self {
        Self { key }
    }

    /// Hex form used only to provision provider processes started out of band.
    pub fn to_provisioning_hex(&self) -> String {
        hex::encode(self.key)
    }

    pub fn from_provisioning_hex(s: &str) -> Option<Self> {
        let raw = hex::decode(s.trim()).ok()?;
        let key: [u8; KEY_LEN] = raw.try_into().ok()?;
        Some(Self { key })
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.key))
    }

    /// Keyed MAC over `data`, domain-separated by `label`.
    pub(crate) fn mac(&self, label: &[u8], data: &[u8]) -> [u8; 32] {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(label);
        mac.update(data);
        mac.finalize().into_bytes().into()
    }

    pub(crate) fn verify_mac(&self, label: &[u8], data: &[u8], tag: &[u8]) -> bool {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(label);
        mac.update(data);
        mac.verify_slice(tag).is_ok()
    }
}

impl fmt::Debug for ProviderSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ProviderSecret(..)")
    }
}

/// Decoded reference contents. Only provider code sees these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlainReference {
    pub producer_addr: SocketAddr,
    pub object_key: u64,
}

/// The printable token handed to user code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct XdtReference(String);

impl XdtReference {
    pub fn from_token(token: impl Into<String>) -> Self {
        Self(token.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for XdtReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The token failed authentication. Carries no detail on purpose: a forged
/// token must not learn anything about why it was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("reference failed authentication")]
pub struct AuthError;

pub fn encode_reference(plain: &PlainReference, secret: &ProviderSecret) -> XdtReference {
    let addr = plain.producer_addr.to_string();
    let mut msg = Vec::with_capacity(OBJECT_KEY_LEN + addr.len());
    msg.extend_from_slice(&plain.object_key.to_be_bytes());
    msg.extend_from_slice(addr.as_bytes());

    let mut nonce = [0u8; NONCE_LEN];
    rand::thread_rng().fill_bytes(&mut nonce);
    let sealed = secret
        .cipher()
        .encrypt(Nonce::from_slice(&nonce), msg.as_slice())
        .expect("chacha20poly1305 encryption of a short buffer cannot fail");

    let mut raw = Vec::with_capacity(NONCE_LEN + sealed.len());
    raw.extend_from_slice(&nonce);
    raw.extend_from_slice(&sealed);
    XdtReference(URL_SAFE_NO_PAD.encode(raw))
}

pub fn decode_reference(reference: &XdtReference, secret: &ProviderSecret) -> Result<PlainReference, AuthError> {
    let token = reference.as_str();
    if token.len() > MAX_TOKEN_LEN {
        return Err(AuthError);
    }
    let raw = URL_SAFE_NO_PAD.decode(token).map_err(|_| AuthError)?;
    if raw.len() < NONCE_LEN + TAG_LEN + OBJECT_KEY_LEN + 1 {
        return Err(AuthError);
    }
    let (nonce, sealed) = raw.split_at(NONCE_LEN);
    let msg = secret
        .cipher()
        .decrypt(Nonce::from_slice(nonce), sealed)
        .map_err(|_| AuthError)?;

    let (key_bytes, addr_bytes) = msg.split_at(OBJECT_KEY_LEN);
    let object_key = u64::from_be_bytes(key_bytes.try_into().map_err(|_| AuthError)?);
    let producer_addr = std::str::from_utf8(addr_bytes)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(AuthError)?;
    Ok(PlainReference { producer_addr, object_key })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plain(addr: &str, key: u64) -> PlainReference {
        PlainReference { producer_addr: addr.parse().unwrap(), object_key: key }
    }

    #[test]
    fn round_trips_first_key() {
        let s = ProviderSecret::generate();
        let p = plain("127.0.0.1:7101", 0);
        assert_eq!(decode_reference(&encode_reference(&p, &s), &s), Ok(p));
    }

    #[test]
    fn round_trips_max_key() {
        let s = ProviderSecret::generate();
        let p = plain("10.0.0.5:9000", u64::MAX);
        assert_eq!(decode_reference(&encode_reference(&p, &s), &s), Ok(p));
    }

    #[test]
    fn fresh_nonce_per_encoding() {
        let s = ProviderSecret::generate();
        let p = plain("127.0.0.1:7101", 42);
        let a = encode_reference(&p, &s);
        let b = encode_reference(&p, &s);
        assert_ne!(a, b);
        assert_eq!(decode_reference(&a, &s), Ok(p));
        assert_eq!(decode_reference(&b, &s), Ok(p));
    }

    #[test]
    fn token_length_is_constant_for_fixed_address_length() {
        let s = ProviderSecret::generate();
        let a = encode_reference(&plain("127.0.0.1:7101", 0), &s);
        let b = encode_reference(&plain("127.0.0.2:7102", u64::MAX), &s);
        assert_eq!(a.as_str().len(), b.as_str().len());
    }

    #[test]
    fn wrong_secret_rejected() {
        let s1 = ProviderSecret::generate();
        let s2 = ProviderSecret::generate();
        let t = encode_reference(&plain("127.0.0.1:7101", 3), &s1);
        assert_eq!(decode_reference(&t, &s2), Err(AuthError));
    }

    #[test]
    fn every_single_bit_flip_of_the_sealed_bytes_is_rejected() {
        let s = ProviderSecret::generate();
        let t = encode_reference(&plain("127.0.0.1:7101", 9), &s);
        let raw = URL_SAFE_NO_PAD.decode(t.as_str()).unwrap();
        for bit in 0..raw.len() * 8 {
            let mut flipped = raw.clone();
            flipped[bit / 8] ^= 1 << (bit % 8);
            let forged = XdtReference::from_token(URL_SAFE_NO_PAD.encode(&flipped));
            assert_eq!(decode_reference(&forged, &s), Err(AuthError), "bit {bit}");
        }
    }

    #[test]
    fn truncated_and_garbage_tokens_rejected() {
        let s = ProviderSecret::generate();
        let t = encode_reference(&plain("127.0.0.1:7101", 9), &s);
        let tok = t.as_str();
        for cut in 0..tok.len() {
            assert!(decode_reference(&XdtReference::from_token(&tok[..cut]), &s).is_err());
        }
        assert!(decode_reference(&XdtReference::from_token("not base64 !!"), &s).is_err());
        assert!(decode_reference(&XdtReference::from_token("A".repeat(10_000)), &s).is_err());
    }

    #[test]
    fn secret_debug_is_redacted() {
        let s = ProviderSecret::from_bytes([0xab; 32]);
        assert!(!format!("{s:?}").contains("ab"));
    }

    #[test]
    fn provisioning_hex_round_trip() {
        let s = ProviderSecret::generate();
        let back = ProviderSecret::from_provisioning_hex(&s.to_provisioning_hex()).unwrap();
        let t = encode_reference(&plain("127.0.0.1:1", 1), &s);
        assert!(decode_reference(&t, &back).is_ok());
        assert!(ProviderSecret::from_provisioning_hex("abcd").is_none());
    }

    proptest! {
        #[test]
        fn round_trip_any_v4_address(a in any::<[u8; 4]>(), port in any::<u16>(), key in any::<u64>()) {
            let s = ProviderSecret::generate();
            let p = PlainReference {
                producer_addr: SocketAddr::from((a, port)),
                object_key: key,
            };
            let t = encode_reference(&p, &s);
            prop_assert_eq!(decode_reference(&t, &s), Ok(p));
            let addr = p.producer_addr.to_string();
            prop_assert!(!t.as_str().contains(&addr));
        }
    }
}
