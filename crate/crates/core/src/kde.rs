//! Key distribution enclave and platform sealing.

use std::collections::HashSet;

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::attestation::{
    ias_verify, AttestationRoot, EnclaveIdentity, KeyBinding, PublicKeys, Quote,
};
use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{
    aead_open, aead_seal, derive_key, derive_session_key, hash, seeded_rng, AeadNonce,
    AgreementKeyPair, AgreementPublic, Digest, SigningKeyPair, VerifyingKey,
};

/// The three key pairs handed to workers.
#[derive(Clone)]
pub struct KeySet {
    pub k_ka: AgreementKeyPair,
    pub k_out: SigningKeyPair,
    pub k_res: SigningKeyPair,
    pub keyset_id: Digest,
    pub created_at: u64,
}

impl std::fmt::Debug for KeySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeySet")
            .field("keyset_id", &self.keyset_id)
            .field("created_at", &self.created_at)
            .finish_non_exhaustive()
    }
}

impl KeySet {
    pub fn from_seed(seed: u64, created_at: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self::from_parts(
            AgreementKeyPair::generate(&mut rng),
            SigningKeyPair::generate(&mut rng),
            SigningKeyPair::generate(&mut rng),
            created_at,
        )
    }

    fn from_parts(
        k_ka: AgreementKeyPair,
        k_out: SigningKeyPair,
        k_res: SigningKeyPair,
        created_at: u64,
    ) -> Self {
        let public = PublicKeys {
            ka: k_ka.public(),
            out: k_out.public(),
            res: k_res.public(),
        };
        Self {
            k_ka,
            k_out,
            k_res,
            keyset_id: public.keyset_id(),
            created_at,
        }
    }

    pub fn public(&self) -> PublicKeys {
        PublicKeys {
            ka: self.k_ka.public(),
            out: self.k_out.public(),
            res: self.k_res.public(),
        }
    }

    /// Serializes the private halves. Only ever passed to an AEAD.
    pub fn secret_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.fixed(&self.k_ka.secret_bytes())
            .fixed(&self.k_out.secret_bytes())
            .fixed(&self.k_res.secret_bytes())
            .u64(self.created_at);
        enc.finish()
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let ka = AgreementKeyPair::from_secret_bytes(dec.array()?);
        let out = SigningKeyPair::from_secret_bytes(dec.array()?);
        let res = SigningKeyPair::from_secret_bytes(dec.array()?);
        let created_at = dec.u64()?;
        dec.finish()?;
        Ok(Self::from_parts(ka, out, res, created_at))
    }
}

/// Public keys plus the KDE quote vouching for them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishedKeys {
    pub keys: PublicKeys,
    pub quote: Quote,
}

impl PublishedKeys {
    pub fn keyset_id(&self) -> Digest {
        self.keys.keyset_id()
    }

    /// Epoch claimed by the quote, if the user data parses.
    pub fn epoch(&self) -> Option<u64> {
        KeyBinding::from_canonical_bytes(&self.quote.user_data)
            .ok()
            .map(|b| b.epoch)
    }

    pub fn res_key(&self) -> &VerifyingKey {
        &self.keys.res
    }
}

impl Canonical for PublishedKeys {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.keys).value(&self.quote);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            keys: dec.value()?,
            quote: dec.value()?,
        })
    }
}

pub fn generate_keyset(
    root: &AttestationRoot,
    kde_identity: EnclaveIdentity,
    seed: u64,
    worker_identity: Digest,
) -> (KeySet, Quote) {
    issue(root, kde_identity, KeySet::from_seed(seed, 0), worker_identity)
}

pub fn rotate_keyset(
    root: &AttestationRoot,
    kde_identity: EnclaveIdentity,
    old: &KeySet,
    seed: u64,
    worker_identity: Digest,
) -> (KeySet, Quote) {
    let next = KeySet::from_seed(seed, old.created_at + 1);
    issue(root, kde_identity, next, worker_identity)
}

fn issue(
    root: &AttestationRoot,
    kde_identity: EnclaveIdentity,
    keyset: KeySet,
    worker_identity: Digest,
) -> (KeySet, Quote) {
    let binding = KeyBinding::new(&keyset.public(), worker_identity, keyset.created_at);
    let quote = root.issue_quote(kde_identity, binding.to_canonical_bytes());
    (keyset, quote)
}

/// A simulated CPU package: an identifier plus a fused secret that never
/// leaves the platform. Sealing keys are derived from the fuse and the
/// enclave identity.
#[derive(Clone)]
pub struct Platform {
    pub id: Digest,
    fuse: [u8; 32],
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("id", &self.id).finish_non_exhaustive()
    }
}

impl Platform {
    pub fn from_seed(seed: u64) -> Self {
        let mut fuse = [0u8; 32];
        seeded_rng(seed ^ 0x0f05e_0000).fill_bytes(&mut fuse);
        let mut tagged = b"platform-id".to_vec();
        tagged.extend_from_slice(&fuse);
        Self {
            id: hash(&tagged),
            fuse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub bound_identity: EnclaveIdentity,
    pub platform_id: Digest,
    pub nonce: AeadNonce,
    pub ciphertext: Vec<u8>,
}

impl Canonical for SealedBlob {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.bound_identity)
            .value(&self.platform_id)
            .value(&self.nonce)
            .bytes(&self.ciphertext);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            bound_identity: dec.value()?,
            platform_id: dec.value()?,
            nonce: dec.value()?,
            ciphertext: dec.bytes()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("sealed data could not be opened")]
pub struct UnsealError;

fn seal_key(platform: &Platform, identity: &EnclaveIdentity) -> crate::crypto::SessionKey {
    let mut label = b"seal".to_vec();
    label.extend_from_slice(&identity.to_canonical_bytes());
    derive_key(&platform.fuse, &label)
}

fn seal_aad(identity: &EnclaveIdentity, platform_id: &Digest) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.value(identity).value(platform_id);
    enc.finish()
}

pub fn seal<R: RngCore>(
    data: &[u8],
    identity: &EnclaveIdentity,
    platform: &Platform,
    rng: &mut R,
) -> SealedBlob {
    let nonce = AeadNonce::random(rng);
    let ciphertext = aead_seal(
        &seal_key(platform, identity),
        &nonce,
        data,
        &seal_aad(identity, &platform.id),
    );
    SealedBlob {
        bound_identity: *identity,
        platform_id: platform.id,
        nonce,
        ciphertext,
    }
}

/// Identity and platform mismatches fail exactly like tampering: the key is
/// derived from the caller's context, never from the blob's claims.
pub fn unseal(
    blob: &SealedBlob,
    identity: &EnclaveIdentity,
    platform: &Platform,
) -> Result<Vec<u8>, UnsealError> {
    aead_open(
        &seal_key(platform, identity),
        &blob.nonce,
        &blob.ciphertext,
        &seal_aad(identity, &platform.id),
    )
    .map_err(|_| UnsealError)
}

/// User data of a worker's attestation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportData {
    pub challenge: Digest,
    pub transport: AgreementPublic,
}

impl Canonical for ReportData {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.challenge).value(&self.transport);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            challenge: dec.value()?,
            transport: dec.value()?,
        })
    }
}

/// The simulated platform vouches for the worker's identity by having the
/// attestation root sign the report.
pub fn worker_report(
    root: &AttestationRoot,
    identity: EnclaveIdentity,
    challenge: Digest,
    transport: AgreementPublic,
) -> Quote {
    root.issue_quote(
        identity,
        ReportData {
            challenge,
            transport,
        }
        .to_canonical_bytes(),
    )
}

/// Private keys sealed to a worker's ephemeral transport key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyDelivery {
    pub kde_transport: AgreementPublic,
    pub epoch: u64,
    pub nonce: AeadNonce,
    pub ciphertext: Vec<u8>,
}

impl Canonical for KeyDelivery {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.kde_transport)
            .u64(self.epoch)
            .value(&self.nonce)
            .bytes(&self.ciphertext);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            kde_transport: dec.value()?,
            epoch: dec.u64()?,
            nonce: dec.value()?,
            ciphertext: dec.bytes()?,
        })
    }
}

fn delivery_aad(worker: &Digest, epoch: u64) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.value(worker).u64(epoch);
    enc.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KdeRejection {
    #[error("worker report rejected: {0}")]
    Attestation(&'static str),
    #[error("attested worker identity does not match the key set's worker identity")]
    Identity,
    #[error("key set already delivered to the configured maximum of {0} workers")]
    SharingLimit(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeliveryError {
    #[error("key delivery failed authentication")]
    Tamper,
    #[error("key delivery carried a malformed key set")]
    Format,
}

/// Worker side of key transport.
pub fn open_delivery(
    transport: &AgreementKeyPair,
    worker: &Digest,
    delivery: &KeyDelivery,
) -> Result<KeySet, DeliveryError> {
    let key =
        derive_session_key(transport, &delivery.kde_transport).map_err(|_| DeliveryError::Tamper)?;
    let plain = aead_open(
        &key,
        &delivery.nonce,
        &delivery.ciphertext,
        &delivery_aad(worker, delivery.epoch),
    )
    .map_err(|_| DeliveryError::Tamper)?;
    let keyset = KeySet::from_secret_bytes(&plain).map_err(|_| DeliveryError::Format)?;
    if keyset.created_at != delivery.epoch {
        return Err(DeliveryError::Format);
    }
    Ok(keyset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KdeConfig {
    /// Upper bound on workers sharing one key set; `None` leaves it open.
    pub max_workers_per_keyset: Option<u32>,
}

/// A single logical KDE: one current key set, retired sets kept for
/// signature verification only.
pub struct Kde {
    root: AttestationRoot,
    identity: EnclaveIdentity,
    worker_identity: Digest,
    current: KeySet,
    current_quote: Quote,
    retired: Vec<PublishedKeys>,
    outstanding: HashSet<Digest>,
    delivered: u32,
    config: KdeConfig,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for Kde {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kde")
            .field("identity", &self.identity)
            .field("current", &self.current)
            .finish_non_exhaustive()
    }
}

impl Kde {
    pub fn new(
        root: AttestationRoot,
        identity: EnclaveIdentity,
        worker_identity: Digest,
        seed: u64,
    ) -> Self {
        Self::with_config(root, identity, worker_identity, seed, KdeConfig::default())
    }

    pub fn with_config(
        root: AttestationRoot,
        identity: EnclaveIdentity,
        worker_identity: Digest,
        seed: u64,
        config: KdeConfig,
    ) -> Self {
        let (current, current_quote) = generate_keyset(&root, identity, seed, worker_identity);
        Self {
            root,
            identity,
            worker_identity,
            current,
            current_quote,
            retired: Vec::new(),
            outstanding: HashSet::new(),
            delivered: 0,
            config,
            rng: seeded_rng(seed.wrapping_add(0x6b64_6500)),
        }
    }

    pub fn identity(&self) -> &EnclaveIdentity {
        &self.identity
    }

    pub fn worker_identity(&self) -> &Digest {
        &self.worker_identity
    }

    pub fn epoch(&self) -> u64 {
        self.current.created_at
    }

    pub fn published(&self) -> PublishedKeys {
        PublishedKeys {
            keys: self.current.public(),
            quote: self.current_quote.clone(),
        }
    }

    pub fn retired(&self) -> &[PublishedKeys] {
        &self.retired
    }

    /// Fresh single-use challenge for a worker report.
    pub fn challenge(&mut self) -> Digest {
        let mut c = [0u8; 32];
        self.rng.fill_bytes(&mut c);
        let c = Digest(c);
        self.outstanding.insert(c);
        c
    }

    pub fn distribute(&mut self, report: &Quote) -> Result<KeyDelivery, KdeRejection> {
        let verified = ias_verify(&self.root.public(), report)
            .map_err(|_| KdeRejection::Attestation("report signature invalid"))?;
        let data = ReportData::from_canonical_bytes(&verified.user_data)
            .map_err(|_| KdeRejection::Attestation("report data malformed"))?;
        if !self.outstanding.remove(&data.challenge) {
            return Err(KdeRejection::Attestation("stale or unknown challenge"));
        }
        if verified.identity.mrenclave != self.worker_identity {
            return Err(KdeRejection::Identity);
        }
        if let Some(limit) = self.config.max_workers_per_keyset {
            if self.delivered >= limit {
                return Err(KdeRejection::SharingLimit(limit));
            }
        }
        let ephemeral = AgreementKeyPair::generate(&mut self.rng);
        let key = derive_session_key(&ephemeral, &data.transport)
            .map_err(|_| KdeRejection::Attestation("worker transport key invalid"))?;
        let nonce = AeadNonce::random(&mut self.rng);
        let epoch = self.current.created_at;
        let ciphertext = aead_seal(
            &key,
            &nonce,
            &self.current.secret_bytes(),
            &delivery_aad(&self.worker_identity, epoch),
        );
        self.delivered += 1;
        Ok(KeyDelivery {
            kde_transport: ephemeral.public(),
            epoch,
            nonce,
            ciphertext,
        })
    }

    pub fn rotate(&mut self, seed: u64) -> PublishedKeys {
        let (next, quote) = rotate_keyset(
            &self.root,
            self.identity,
            &self.current,
            seed,
            self.worker_identity,
        );
        self.retired.push(self.published());
        self.current = next;
        self.current_quote = quote;
        self.delivered = 0;
        self.published()
    }

    /// Current and retired published key sets, newest first.
    pub fn all_published(&self) -> Vec<PublishedKeys> {
        let mut all = vec![self.published()];
        all.extend(self.retired.iter().rev().cloned());
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::verify_transitive;

    const WORKER_CODE: &[u8] = b"worker";

    fn signer() -> VerifyingKey {
        SigningKeyPair::from_seed(5).public()
    }

    fn kde_identity() -> EnclaveIdentity {
        EnclaveIdentity::measure(b"kde", b"", None, &signer())
    }

    fn worker_identity() -> EnclaveIdentity {
        EnclaveIdentity::measure(WORKER_CODE, b"", None, &signer())
    }

    fn kde() -> Kde {
        Kde::new(
            AttestationRoot::from_seed(1),
            kde_identity(),
            worker_identity().mrenclave,
            10,
        )
    }

    #[test]
    fn distinct_seeds_give_distinct_keysets() {
        let root = AttestationRoot::from_seed(1);
        let w = worker_identity().mrenclave;
        let (a, _) = generate_keyset(&root, kde_identity(), 1, w);
        let (b, _) = generate_keyset(&root, kde_identity(), 2, w);
        assert_ne!(a.keyset_id, b.keyset_id);
        assert_eq!(a.keyset_id, hash(&a.public().to_canonical_bytes()));
    }

    #[test]
    fn generated_quote_passes_transitive_check_and_names_worker() {
        let root = AttestationRoot::from_seed(1);
        let w = worker_identity().mrenclave;
        let (ks, quote) = generate_keyset(&root, kde_identity(), 1, w);
        verify_transitive(&root.public(), &quote, &kde_identity().mrenclave, &ks.public(), &w)
            .unwrap();
        let binding = KeyBinding::from_canonical_bytes(&quote.user_data).unwrap();
        assert_eq!(binding.worker.0, w.0);
    }

    #[test]
    fn matching_worker_opens_delivery() {
        let mut kde = kde();
        let root = AttestationRoot::from_seed(1);
        let transport = AgreementKeyPair::from_seed(77);
        let report = worker_report(&root, worker_identity(), kde.challenge(), transport.public());
        let delivery = kde.distribute(&report).unwrap();
        let ks = open_delivery(&transport, &worker_identity().mrenclave, &delivery).unwrap();
        assert_eq!(ks.keyset_id, kde.published().keyset_id());
    }

    #[test]
    fn rogue_identity_rejected() {
        let mut kde = kde();
        let root = AttestationRoot::from_seed(1);
        let rogue = EnclaveIdentity::measure(b"rogue", b"", None, &signer());
        let report = worker_report(
            &root,
            rogue,
            kde.challenge(),
            AgreementKeyPair::from_seed(1).public(),
        );
        assert_eq!(kde.distribute(&report), Err(KdeRejection::Identity));
    }

    #[test]
    fn tampered_or_replayed_report_rejected() {
        let mut kde = kde();
        let root = AttestationRoot::from_seed(1);
        let report = worker_report(
            &root,
            worker_identity(),
            kde.challenge(),
            AgreementKeyPair::from_seed(1).public(),
        );
        let mut tampered = report.clone();
        let mut data = ReportData::from_canonical_bytes(&tampered.user_data).unwrap();
        data.transport = AgreementKeyPair::from_seed(2).public();
        tampered.user_data = data.to_canonical_bytes();
        assert!(matches!(kde.distribute(&tampered), Err(KdeRejection::Attestation(_))));
        kde.distribute(&report).unwrap();
        assert!(matches!(kde.distribute(&report), Err(KdeRejection::Attestation(_))));
    }

    #[test]
    fn sharing_limit_is_opt_in() {
        let root = AttestationRoot::from_seed(1);
        let mut kde = Kde::with_config(
            root.clone(),
            kde_identity(),
            worker_identity().mrenclave,
            10,
            KdeConfig {
                max_workers_per_keyset: Some(1),
            },
        );
        let t = AgreementKeyPair::from_seed(3).public();
        let r1 = worker_report(&root, worker_identity(), kde.challenge(), t);
        let r2 = worker_report(&root, worker_identity(), kde.challenge(), t);
        kde.distribute(&r1).unwrap();
        assert_eq!(kde.distribute(&r2), Err(KdeRejection::SharingLimit(1)));
    }

    #[test]
    fn rotation_advances_epoch_and_retires_old_set() {
        let mut kde = kde();
        let root = AttestationRoot::from_seed(1);
        let old = kde.published();
        let new = kde.rotate(11);
        assert_eq!(new.epoch(), Some(old.epoch().unwrap() + 1));
        assert_eq!(kde.retired(), &[old.clone()]);
        for p in [&old, &new] {
            verify_transitive(
                &root.public(),
                &p.quote,
                &kde_identity().mrenclave,
                &p.keys,
                &worker_identity().mrenclave,
            )
            .unwrap();
        }
        let transport = AgreementKeyPair::from_seed(8);
        let report = worker_report(&root, worker_identity(), kde.challenge(), transport.public());
        let ks = open_delivery(
            &transport,
            &worker_identity().mrenclave,
            &kde.distribute(&report).unwrap(),
        )
        .unwrap();
        assert_eq!(ks.keyset_id, new.keyset_id());
        assert_eq!(ks.created_at, 1);
    }

    #[test]
    fn seal_binds_identity_and_platform() {
        let p1 = Platform::from_seed(1);
        let p2 = Platform::from_seed(2);
        let id = worker_identity();
        let mut rng = seeded_rng(4);
        let blob = seal(b"keys", &id, &p1, &mut rng);
        assert_eq!(unseal(&blob, &id, &p1).unwrap(), b"keys");
        assert_eq!(unseal(&blob, &id, &p2), Err(UnsealError));
        let param = EnclaveIdentity::measure(WORKER_CODE, b"", Some(hash(b"tenant")), &signer());
        assert_eq!(unseal(&blob, &param, &p1), Err(UnsealError));
        let mut bad = blob.clone();
        bad.ciphertext[0] ^= 1;
        assert_eq!(unseal(&bad, &id, &p1), Err(UnsealError));
    }

    fn contains(haystack: &[u8], needle: &[u8]) -> bool {
        haystack.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn private_halves_never_published() {
        let mut kde = kde();
        let root = AttestationRoot::from_seed(1);
        let mut outputs = vec![kde.published().to_canonical_bytes()];
        let transport = AgreementKeyPair::from_seed(9);
        let report = worker_report(&root, worker_identity(), kde.challenge(), transport.public());
        outputs.push(kde.distribute(&report).unwrap().to_canonical_bytes());
        outputs.push(kde.rotate(12).to_canonical_bytes());
        let ks = &kde.current;
        let old = open_delivery(
            &transport,
            &worker_identity().mrenclave,
            &KeyDelivery::from_canonical_bytes(&outputs[1]).unwrap(),
        )
        .unwrap();
        for keys in [ks, &old] {
            for secret in [
                keys.k_ka.secret_bytes(),
                keys.k_out.secret_bytes(),
                keys.k_res.secret_bytes(),
            ] {
                for out in &outputs {
                    assert!(!contains(out, &secret));
                }
            }
        }
    }
}
