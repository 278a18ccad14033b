//! Simulated attestation root and transitive attestation checks.
//!
//! The root stands in for the vendor attestation service: it signs quotes
//! binding an enclave identity to caller-supplied user data. Relying parties
//! hold the root's public key from configuration and attest only the key
//! distribution enclave; the quote's user data names the worker identity the
//! KDE will release private keys to.

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{
    hash, sign, verify, AgreementPublic, Digest, Signature, SigningKeyPair, VerifyingKey,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnclaveIdentity {
    pub mrenclave: Digest,
    pub mrsigner: Digest,
    pub parametrization: Option<Digest>,
}

impl EnclaveIdentity {
    /// Derives the code identity from the enclave image, its configuration and
    /// an optional damage-containment parameter. The parameter is folded into
    /// `mrenclave`, so differently parametrized enclaves never share sealed data.
    pub fn measure(
        code: &[u8],
        config: &[u8],
        parametrization: Option<Digest>,
        signer: &VerifyingKey,
    ) -> Self {
        let mut enc = Encoder::new();
        enc.value(&hash(code))
            .bytes(config)
            .option(parametrization.as_ref());
        Self {
            mrenclave: hash(&enc.finish()),
            mrsigner: hash(&signer.0),
            parametrization,
        }
    }
}

impl Canonical for EnclaveIdentity {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.mrenclave)
            .value(&self.mrsigner)
            .option(self.parametrization.as_ref());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            mrenclave: dec.value()?,
            mrsigner: dec.value()?,
            parametrization: dec.option()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub identity: EnclaveIdentity,
    pub user_data: Vec<u8>,
    pub ias_signature: Signature,
}

fn quote_message(identity: &EnclaveIdentity, user_data: &[u8]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.value(identity).bytes(user_data);
    enc.finish()
}

impl Canonical for Quote {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.identity)
            .bytes(&self.user_data)
            .value(&self.ias_signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            identity: dec.value()?,
            user_data: dec.bytes()?,
            ias_signature: dec.value()?,
        })
    }
}

/// The single signing authority of a simulated deployment.
#[derive(Debug, Clone)]
pub struct AttestationRoot {
    keypair: SigningKeyPair,
}

impl AttestationRoot {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            keypair: SigningKeyPair::from_seed(seed ^ 0x1a5_0000_0000),
        }
    }

    pub fn from_keypair(keypair: SigningKeyPair) -> Self {
        Self { keypair }
    }

    pub fn keypair(&self) -> &SigningKeyPair {
        &self.keypair
    }

    pub fn public(&self) -> VerifyingKey {
        self.keypair.public()
    }

    pub fn issue_quote(&self, identity: EnclaveIdentity, user_data: Vec<u8>) -> Quote {
        let ias_signature = sign(&self.keypair, &quote_message(&identity, &user_data));
        Quote {
            identity,
            user_data,
            ias_signature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttestationError {
    #[error("quote signature does not verify under the attestation root")]
    BadSignature,
    #[error("malformed quote: {0}")]
    Format(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedQuote {
    pub identity: EnclaveIdentity,
    pub user_data: Vec<u8>,
}

pub fn ias_verify(root: &VerifyingKey, quote: &Quote) -> Result<VerifiedQuote, AttestationError> {
    if !verify(
        root,
        &quote_message(&quote.identity, &quote.user_data),
        &quote.ias_signature,
    ) {
        return Err(AttestationError::BadSignature);
    }
    Ok(VerifiedQuote {
        identity: quote.identity,
        user_data: quote.user_data.clone(),
    })
}

/// Parses a serialized quote and verifies it in one go.
pub fn ias_verify_bytes(
    root: &VerifyingKey,
    bytes: &[u8],
) -> Result<VerifiedQuote, AttestationError> {
    let quote = Quote::from_canonical_bytes(bytes)?;
    ias_verify(root, &quote)
}

/// The public halves of a key set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublicKeys {
    pub ka: AgreementPublic,
    pub out: VerifyingKey,
    pub res: VerifyingKey,
}

impl PublicKeys {
    pub fn keyset_id(&self) -> Digest {
        hash(&self.to_canonical_bytes())
    }
}

impl Canonical for PublicKeys {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.ka).value(&self.out).value(&self.res);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            ka: dec.value()?,
            out: dec.value()?,
            res: dec.value()?,
        })
    }
}

/// Quote user data emitted by the KDE: hashes of the three public keys,
/// the worker identity they are gated to, and the key-set epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyBinding {
    pub h_ka: Digest,
    pub h_out: Digest,
    pub h_res: Digest,
    pub worker: Digest,
    pub epoch: u64,
}

impl KeyBinding {
    pub fn new(keys: &PublicKeys, worker: Digest, epoch: u64) -> Self {
        Self {
            h_ka: hash(&keys.ka.0),
            h_out: hash(&keys.out.0),
            h_res: hash(&keys.res.0),
            worker,
            epoch,
        }
    }
}

impl Canonical for KeyBinding {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.h_ka)
            .value(&self.h_out)
            .value(&self.h_res)
            .value(&self.worker)
            .u64(self.epoch);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            h_ka: dec.value()?,
            h_out: dec.value()?,
            h_res: dec.value()?,
            worker: dec.value()?,
            epoch: dec.u64()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyRole {
    KeyAgreement,
    OutputSigning,
    MeasurementSigning,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitiveRejection {
    #[error("quote rejected by the attestation root: {0}")]
    Attestation(AttestationError),
    #[error("quote was not produced by the expected key distribution enclave")]
    KdeIdentity,
    #[error("published {0:?} key does not match the quoted hash")]
    KeyHash(KeyRole),
    #[error("quote gates the keys to a different worker identity")]
    WorkerIdentity,
    #[error("malformed quote user data: {0}")]
    Format(CodecError),
}

/// Result of a successful transitive check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustedKeys {
    pub keys: PublicKeys,
    pub worker: Digest,
    pub epoch: u64,
}

/// The relying party's whole trust decision: the quote comes from the
/// expected KDE, it vouches for exactly these public keys, and it gates them
/// to the expected worker identity. No worker is attested directly.
pub fn verify_transitive(
    root: &VerifyingKey,
    quote: &Quote,
    expected_kde: &Digest,
    published: &PublicKeys,
    expected_worker: &Digest,
) -> Result<TrustedKeys, TransitiveRejection> {
    let verified = ias_verify(root, quote).map_err(TransitiveRejection::Attestation)?;
    if verified.identity.mrenclave != *expected_kde {
        return Err(TransitiveRejection::KdeIdentity);
    }
    let binding = KeyBinding::from_canonical_bytes(&verified.user_data)
        .map_err(TransitiveRejection::Format)?;
    let expected = KeyBinding::new(published, *expected_worker, binding.epoch);
    if binding.h_ka != expected.h_ka {
        return Err(TransitiveRejection::KeyHash(KeyRole::KeyAgreement));
    }
    if binding.h_out != expected.h_out {
        return Err(TransitiveRejection::KeyHash(KeyRole::OutputSigning));
    }
    if binding.h_res != expected.h_res {
        return Err(TransitiveRejection::KeyHash(KeyRole::MeasurementSigning));
    }
    if binding.worker != *expected_worker {
        return Err(TransitiveRejection::WorkerIdentity);
    }
    Ok(TrustedKeys {
        keys: *published,
        worker: binding.worker,
        epoch: binding.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::AgreementKeyPair;
    use proptest::prelude::*;

    fn identity(tag: &[u8]) -> EnclaveIdentity {
        EnclaveIdentity::measure(tag, b"cfg", None, &SigningKeyPair::from_seed(99).public())
    }

    fn keys(seed: u64) -> PublicKeys {
        PublicKeys {
            ka: AgreementKeyPair::from_seed(seed).public(),
            out: SigningKeyPair::from_seed(seed + 1).public(),
            res: SigningKeyPair::from_seed(seed + 2).public(),
        }
    }

    struct Bundle {
        root: AttestationRoot,
        kde: EnclaveIdentity,
        worker: Digest,
        keys: PublicKeys,
        quote: Quote,
    }

    fn bundle() -> Bundle {
        let root = AttestationRoot::from_seed(1);
        let kde = identity(b"kde");
        let worker = identity(b"worker").mrenclave;
        let keys = keys(40);
        let quote = root.issue_quote(kde, KeyBinding::new(&keys, worker, 0).to_canonical_bytes());
        Bundle {
            root,
            kde,
            worker,
            keys,
            quote,
        }
    }

    #[test]
    fn identical_inputs_measure_identically() {
        let signer = SigningKeyPair::from_seed(3).public();
        let a = EnclaveIdentity::measure(b"code", b"cfg", None, &signer);
        assert_eq!(a, EnclaveIdentity::measure(b"code", b"cfg", None, &signer));
        let p = EnclaveIdentity::measure(b"code", b"cfg", Some(hash(b"client-a")), &signer);
        assert_ne!(a.mrenclave, p.mrenclave);
    }

    #[test]
    fn issued_quote_verifies_only_under_its_root() {
        let b = bundle();
        let v = ias_verify(&b.root.public(), &b.quote).unwrap();
        assert_eq!(v.identity, b.kde);
        let other = AttestationRoot::from_seed(2);
        assert_eq!(
            ias_verify(&other.public(), &b.quote),
            Err(AttestationError::BadSignature)
        );
        let mut tampered = b.quote.clone();
        tampered.user_data[5] ^= 1;
        assert_eq!(
            ias_verify(&b.root.public(), &tampered),
            Err(AttestationError::BadSignature)
        );
    }

    #[test]
    fn truncated_quote_is_a_format_error() {
        let b = bundle();
        let bytes = b.quote.to_canonical_bytes();
        assert!(matches!(
            ias_verify_bytes(&b.root.public(), &bytes[..bytes.len() - 70]),
            Err(AttestationError::Format(_))
        ));
    }

    #[test]
    fn well_formed_chain_accepted() {
        let b = bundle();
        let t = verify_transitive(
            &b.root.public(),
            &b.quote,
            &b.kde.mrenclave,
            &b.keys,
            &b.worker,
        )
        .unwrap();
        assert_eq!(t.keys, b.keys);
        assert_eq!(t.epoch, 0);
    }

    #[test]
    fn substituted_agreement_key_rejected() {
        let b = bundle();
        let mut keys = b.keys;
        keys.ka = AgreementKeyPair::from_seed(777).public();
        assert_eq!(
            verify_transitive(&b.root.public(), &b.quote, &b.kde.mrenclave, &keys, &b.worker),
            Err(TransitiveRejection::KeyHash(KeyRole::KeyAgreement))
        );
    }

    #[test]
    fn other_kde_and_other_worker_rejected() {
        let b = bundle();
        let rogue_kde = identity(b"rogue-kde");
        let q = b.root.issue_quote(rogue_kde, b.quote.user_data.clone());
        assert_eq!(
            verify_transitive(&b.root.public(), &q, &b.kde.mrenclave, &b.keys, &b.worker),
            Err(TransitiveRejection::KdeIdentity)
        );
        assert_eq!(
            verify_transitive(
                &b.root.public(),
                &b.quote,
                &b.kde.mrenclave,
                &b.keys,
                &identity(b"other-worker").mrenclave
            ),
            Err(TransitiveRejection::WorkerIdentity)
        );
    }

    #[test]
    fn reordered_key_hashes_rejected() {
        let b = bundle();
        let mut binding = KeyBinding::from_canonical_bytes(&b.quote.user_data).unwrap();
        std::mem::swap(&mut binding.h_out, &mut binding.h_res);
        let q = b.root.issue_quote(b.kde, binding.to_canonical_bytes());
        assert_eq!(
            verify_transitive(&b.root.public(), &q, &b.kde.mrenclave, &b.keys, &b.worker),
            Err(TransitiveRejection::KeyHash(KeyRole::OutputSigning))
        );
    }

    #[test]
    fn short_user_data_is_a_format_rejection() {
        let b = bundle();
        let q = b.root.issue_quote(b.kde, b.quote.user_data[..100].to_vec());
        assert!(matches!(
            verify_transitive(&b.root.public(), &q, &b.kde.mrenclave, &b.keys, &b.worker),
            Err(TransitiveRejection::Format(_))
        ));
    }

    proptest! {
        // Any single-byte change anywhere in the serialized bundle is rejected.
        #[test]
        fn single_field_mutations_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
            let b = bundle();
            let mut quote_bytes = b.quote.to_canonical_bytes();
            let keys_bytes = b.keys.to_canonical_bytes();
            let total = quote_bytes.len() + keys_bytes.len();
            let i = pos.index(total);
            let mut keys_mut = keys_bytes.clone();
            if i < quote_bytes.len() {
                quote_bytes[i] ^= 1 << bit;
            } else {
                keys_mut[i - quote_bytes.len()] ^= 1 << bit;
            }
            let verdict = Quote::from_canonical_bytes(&quote_bytes)
                .map_err(|_| ())
                .and_then(|q| {
                    let k = PublicKeys::from_canonical_bytes(&keys_mut).map_err(|_| ())?;
                    verify_transitive(&b.root.public(), &q, &b.kde.mrenclave, &k, &b.worker)
                        .map_err(|_| ())
                });
            prop_assert!(verdict.is_err());
        }
    }
}
