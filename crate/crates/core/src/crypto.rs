//! Cryptographic primitives used by the protocol messages.
//!
//! * hash: SHA-256
//! * signatures: Ed25519
//! * key agreement: X25519, expanded with HKDF-SHA256 into a 256-bit session key
//! * authenticated encryption: AES-256-GCM with 96-bit nonces
//!
//! All key generation takes an explicit seed or RNG so runs are reproducible.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const AEAD_NONCE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("malformed key material: {0}")]
    MalformedKey(&'static str),
    #[error("key agreement produced a non-contributory shared secret")]
    KeyAgreement,
    #[error("authenticated decryption failed")]
    Tamper,
}

/// Deterministic RNG for key generation and nonces.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn fmt_hex(bytes: &[u8], f: &mut fmt::Formatter<'_>) -> fmt::Result {
    for b in bytes {
        write!(f, "{b:02x}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.to_string()
    }

    pub fn from_hex(s: &str) -> Result<Self, CodecError> {
        let s = s.trim();
        if s.len() != DIGEST_LEN * 2 {
            return Err(CodecError::Invalid("digest hex must be 64 characters"));
        }
        let mut out = [0u8; DIGEST_LEN];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| CodecError::Invalid("digest hex contains a non-hex character"))?;
        }
        Ok(Self(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_hex(&self.0, f)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest(")?;
        fmt_hex(&self.0, f)?;
        write!(f, ")")
    }
}

impl Canonical for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the canonical encoding of a structure.
pub fn hash_canonical<T: Canonical>(value: &T) -> Digest {
    hash(&value.to_canonical_bytes())
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature(")?;
        fmt_hex(&self.0[..8], f)?;
        write!(f, "..)")
    }
}

impl Canonical for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

/// Ed25519 verification key bytes. Parsing is deferred to [`verify`], so a
/// malformed key simply fails verification.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct VerifyingKey(pub [u8; PUBLIC_KEY_LEN]);

impl fmt::Debug for VerifyingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyingKey(")?;
        fmt_hex(&self.0, f)?;
        write!(f, ")")
    }
}

impl Canonical for VerifyingKey {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

#[derive(Clone)]
pub struct SigningKeyPair {
    key: ed25519_dalek::SigningKey,
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            key: ed25519_dalek::SigningKey::generate(rng),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut seeded_rng(seed))
    }

    pub fn from_secret_bytes(secret: [u8; 32]) -> Self {
        Self {
            key: ed25519_dalek::SigningKey::from_bytes(&secret),
        }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn public(&self) -> VerifyingKey {
        VerifyingKey(self.key.verifying_key().to_bytes())
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

pub fn sign(key: &SigningKeyPair, message: &[u8]) -> Signature {
    Signature(key.key.sign(message).to_bytes())
}

pub fn verify(key: &VerifyingKey, message: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify(message, &sig).is_ok()
}

/// X25519 public value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgreementPublic(pub [u8; PUBLIC_KEY_LEN]);

impl AgreementPublic {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::MalformedKey("agreement public key must be 32 bytes"))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for AgreementPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AgreementPublic(")?;
        fmt_hex(&self.0, f)?;
        write!(f, ")")
    }
}

impl Canonical for AgreementPublic {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

#[derive(Clone)]
pub struct AgreementKeyPair {
    secret: x25519_dalek::StaticSecret,
    public: AgreementPublic,
}

impl AgreementKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_secret_bytes(bytes)
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut seeded_rng(seed))
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = x25519_dalek::StaticSecret::from(bytes);
        let public = AgreementPublic(x25519_dalek::PublicKey::from(&secret).to_bytes());
        Self { secret, public }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public(&self) -> AgreementPublic {
        self.public
    }
}

impl fmt::Debug for AgreementKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgreementKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey([u8; 32]);

impl SessionKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

const SESSION_SALT: &[u8] = b"mfaas/session-key/v1";

/// ECDH followed by HKDF. The info string binds both public values in
/// sorted order, so either side derives the same key.
pub fn derive_session_key(
    mine: &AgreementKeyPair,
    peer: &AgreementPublic,
) -> Result<SessionKey, CryptoError> {
    let shared = mine
        .secret
        .diffie_hellman(&x25519_dalek::PublicKey::from(peer.0));
    if !shared.was_contributory() {
        return Err(CryptoError::KeyAgreement);
    }
    let (lo, hi) = if mine.public <= *peer {
        (mine.public, *peer)
    } else {
        (*peer, mine.public)
    };
    let mut info = Vec::with_capacity(64);
    info.extend_from_slice(&lo.0);
    info.extend_from_slice(&hi.0);
    let hk = Hkdf::<Sha256>::new(Some(SESSION_SALT), shared.as_bytes());
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    Ok(SessionKey(okm))
}

/// Parses the peer bytes before deriving.
pub fn derive_session_key_from_bytes(
    mine: &AgreementKeyPair,
    peer: &[u8],
) -> Result<SessionKey, CryptoError> {
    derive_session_key(mine, &AgreementPublic::from_slice(peer)?)
}

/// Expands key material into a symmetric key for a named purpose.
pub fn derive_key(ikm: &[u8], label: &[u8]) -> SessionKey {
    let hk = Hkdf::<Sha256>::new(Some(SESSION_SALT), ikm);
    let mut okm = [0u8; 32];
    hk.expand(label, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    SessionKey(okm)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AeadNonce(pub [u8; AEAD_NONCE_LEN]);

impl AeadNonce {
    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut n = [0u8; AEAD_NONCE_LEN];
        rng.fill_bytes(&mut n);
        Self(n)
    }
}

impl fmt::Debug for AeadNonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AeadNonce(")?;
        fmt_hex(&self.0, f)?;
        write!(f, ")")
    }
}

impl Canonical for AeadNonce {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

pub fn aead_seal(key: &SessionKey, nonce: &AeadNonce, plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
    let cipher = Aes256Gcm::new_from_slice(&key.0).expect("AES-256 key is 32 bytes");
    cipher
        .encrypt(
            Nonce::from_slice(&nonce.0),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .expect("AES-GCM encryption of in-memory buffers cannot fail")
}

pub fn aead_open(
    key: &SessionKey,
    nonce: &AeadNonce,
    ciphertext: &[u8],
    aad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes256Gcm::new_from_slice(&key.0).expect("AES-256 key is 32 bytes");
    cipher
        .decrypt(
            Nonce::from_slice(&nonce.0),
            Payload {
                msg: ciphertext,
                aad,
            },
        )
        .map_err(|_| CryptoError::Tamper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hash_of_empty_matches_published_sha256() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_is_deterministic_and_bit_sensitive() {
        let data = b"function image".to_vec();
        assert_eq!(hash(&data), hash(&data));
        let mut flipped = data.clone();
        flipped[3] ^= 0x01;
        assert_ne!(hash(&data), hash(&flipped));
    }

    #[test]
    fn digest_hex_roundtrip() {
        let d = hash(b"x");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(Digest::from_hex("zz").is_err());
    }

    #[test]
    fn signatures_bind_message_and_key() {
        let a = SigningKeyPair::from_seed(1);
        let b = SigningKeyPair::from_seed(2);
        let sig = sign(&a, b"receipt");
        assert!(verify(&a.public(), b"receipt", &sig));
        assert!(!verify(&a.public(), b"receipu", &sig));
        assert!(!verify(&b.public(), b"receipt", &sig));
    }

    #[test]
    fn malformed_signature_is_a_failed_verification() {
        let a = SigningKeyPair::from_seed(1);
        assert!(!verify(&a.public(), b"m", &Signature([0xff; 64])));
        assert!(!verify(&VerifyingKey([0xff; 32]), b"m", &sign(&a, b"m")));
    }

    #[test]
    fn session_keys_agree_and_separate_peers() {
        let a = AgreementKeyPair::from_seed(10);
        let b = AgreementKeyPair::from_seed(11);
        let c = AgreementKeyPair::from_seed(12);
        let ab = derive_session_key(&a, &b.public()).unwrap();
        assert_eq!(ab, derive_session_key(&b, &a.public()).unwrap());
        assert_ne!(ab, derive_session_key(&a, &c.public()).unwrap());
    }

    #[test]
    fn malformed_peer_rejected() {
        let a = AgreementKeyPair::from_seed(10);
        assert!(matches!(
            derive_session_key_from_bytes(&a, &[1, 2, 3]),
            Err(CryptoError::MalformedKey(_))
        ));
        // The identity point yields an all-zero shared secret.
        assert_eq!(
            derive_session_key_from_bytes(&a, &[0u8; 32]),
            Err(CryptoError::KeyAgreement)
        );
    }

    #[test]
    fn aead_rejects_tampering() {
        let key = SessionKey([7; 32]);
        let nonce = AeadNonce([1; 12]);
        let ct = aead_seal(&key, &nonce, b"inputs", b"aad");
        assert_eq!(aead_open(&key, &nonce, &ct, b"aad").unwrap(), b"inputs");
        let mut bad = ct.clone();
        bad[0] ^= 1;
        assert_eq!(aead_open(&key, &nonce, &bad, b"aad"), Err(CryptoError::Tamper));
        assert_eq!(aead_open(&key, &nonce, &ct, b"aae"), Err(CryptoError::Tamper));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn aead_roundtrip_and_tamper(
            key in any::<[u8; 32]>(),
            nonce in any::<[u8; 12]>(),
            pt in proptest::collection::vec(any::<u8>(), 0..64),
            aad in proptest::collection::vec(any::<u8>(), 0..16),
            flip in any::<prop::sample::Index>(),
        ) {
            let key = SessionKey(key);
            let nonce = AeadNonce(nonce);
            let ct = aead_seal(&key, &nonce, &pt, &aad);
            prop_assert_eq!(aead_open(&key, &nonce, &ct, &aad).unwrap(), pt);
            let mut bad = ct.clone();
            let i = flip.index(bad.len());
            bad[i] ^= 0x80;
            prop_assert_eq!(aead_open(&key, &nonce, &bad, &aad), Err(CryptoError::Tamper));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1_000))]
        #[test]
        fn session_key_symmetry(sa in any::<[u8; 32]>(), sb in any::<[u8; 32]>()) {
            let a = AgreementKeyPair::from_secret_bytes(sa);
            let b = AgreementKeyPair::from_secret_bytes(sb);
            prop_assert_eq!(
                derive_session_key(&a, &b.public()).unwrap(),
                derive_session_key(&b, &a.public()).unwrap()
            );
        }
    }
}
