//! Worker enclave lifecycle: key acquisition, function provisioning,
//! authenticated metered invocation and the encrypted response.

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::attestation::{AttestationRoot, EnclaveIdentity};
use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{
    aead_open, aead_seal, derive_session_key, hash, hash_canonical, seeded_rng, sign, verify,
    AeadNonce, AgreementKeyPair, AgreementPublic, CryptoError, Digest, SessionKey, Signature,
    VerifyingKey,
};
use crate::kde::{
    open_delivery, seal, unseal, worker_report, DeliveryError, Kde, KdeRejection, KeySet, Platform,
    SealedBlob,
};
use crate::metering::{build_signed_measurement, tag_for_token, Measurement, SignedMeasurement};
use crate::runtime::{run_metered, HostInterrupt, MeteredRun, RunConfig, RunOutcome, RunRequest, RuntimeError};
use crate::vm::{vm_load, FunctionImage, LoadError, VmStatus};

/// Code measured into the worker's identity.
pub const WORKER_CODE: &[u8] = b"mfaas worker enclave v1";
pub const KDE_CODE: &[u8] = b"mfaas key distribution enclave v1";

const REQUEST_AAD: &[u8] = b"mfaas/request/v1";
const RESPONSE_AAD: &[u8] = b"mfaas/response/v1";

pub fn worker_identity(signer: &VerifyingKey) -> EnclaveIdentity {
    EnclaveIdentity::measure(WORKER_CODE, b"", None, signer)
}

pub fn kde_identity(signer: &VerifyingKey) -> EnclaveIdentity {
    EnclaveIdentity::measure(KDE_CODE, b"", None, signer)
}

/// Plaintext of a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestPayload {
    pub input: Vec<u8>,
    pub function_hash: Digest,
    pub receipt: bool,
    pub want_measurement: bool,
    /// Client freshness nonce, echoed in the response.
    pub nonce: Digest,
    pub token: Option<Vec<u8>>,
}

impl Canonical for RequestPayload {
    fn encode(&self, enc: &mut Encoder) {
        enc.bytes(&self.input)
            .value(&self.function_hash)
            .bool(self.receipt)
            .bool(self.want_measurement)
            .value(&self.nonce)
            .option(self.token.as_ref());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            input: dec.bytes()?,
            function_hash: dec.value()?,
            receipt: dec.bool()?,
            want_measurement: dec.bool()?,
            nonce: dec.value()?,
            token: dec.option()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedRequest {
    pub client_pub: AgreementPublic,
    pub aead_nonce: AeadNonce,
    pub ciphertext: Vec<u8>,
}

impl Canonical for EncryptedRequest {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.client_pub)
            .value(&self.aead_nonce)
            .bytes(&self.ciphertext);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            client_pub: dec.value()?,
            aead_nonce: dec.value()?,
            ciphertext: dec.bytes()?,
        })
    }
}

fn request_aad(client_pub: &AgreementPublic) -> Vec<u8> {
    let mut aad = REQUEST_AAD.to_vec();
    aad.extend_from_slice(&client_pub.0);
    aad
}

/// Client half: encrypts a payload to the worker's agreement key.
pub fn seal_request<R: RngCore>(
    client: &AgreementKeyPair,
    worker_ka: &AgreementPublic,
    payload: &RequestPayload,
    rng: &mut R,
) -> Result<(EncryptedRequest, SessionKey), CryptoError> {
    let key = derive_session_key(client, worker_ka)?;
    let client_pub = client.public();
    let aead_nonce = AeadNonce::random(rng);
    let ciphertext = aead_seal(
        &key,
        &aead_nonce,
        &payload.to_canonical_bytes(),
        &request_aad(&client_pub),
    );
    Ok((
        EncryptedRequest {
            client_pub,
            aead_nonce,
            ciphertext,
        },
        key,
    ))
}

/// Function output, or the error reported in its place.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvocationResult {
    Output(Vec<u8>),
    Error(String),
}

impl InvocationResult {
    /// Digest bound by receipts: the raw output, or the encoded error.
    pub fn digest(&self) -> Digest {
        match self {
            InvocationResult::Output(o) => hash(o),
            InvocationResult::Error(_) => hash_canonical(self),
        }
    }
}

impl Canonical for InvocationResult {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            InvocationResult::Output(o) => enc.u8(0).bytes(o),
            InvocationResult::Error(e) => enc.u8(1).str(e),
        };
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let offset = dec.position();
        match dec.u8()? {
            0 => Ok(InvocationResult::Output(dec.bytes()?)),
            1 => Ok(InvocationResult::Error(dec.string()?)),
            value => Err(CodecError::InvalidTag {
                what: "invocation result",
                offset,
                value,
            }),
        }
    }
}

/// Signed statement that function F on input I produced O.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub h_input: Digest,
    pub h_function: Digest,
    pub h_output: Digest,
    pub h_measurement: Option<Digest>,
    pub keyset_id: Digest,
    pub signature: Signature,
}

impl Receipt {
    fn body(
        h_input: &Digest,
        h_function: &Digest,
        h_output: &Digest,
        h_measurement: Option<&Digest>,
        keyset_id: &Digest,
    ) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.value(h_input)
            .value(h_function)
            .value(h_output)
            .option(h_measurement)
            .value(keyset_id);
        enc.finish()
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        Self::body(
            &self.h_input,
            &self.h_function,
            &self.h_output,
            self.h_measurement.as_ref(),
            &self.keyset_id,
        )
    }

    pub fn verify(&self, k_out: &VerifyingKey) -> bool {
        verify(k_out, &self.body_bytes(), &self.signature)
    }

    /// Signature check plus recomputation of the bound digests.
    pub fn verify_for(
        &self,
        k_out: &VerifyingKey,
        input: &[u8],
        function_hash: &Digest,
        result: &InvocationResult,
    ) -> Result<(), ReceiptMismatch> {
        if !self.verify(k_out) {
            return Err(ReceiptMismatch::Signature);
        }
        if self.h_input != hash(input) {
            return Err(ReceiptMismatch::Input);
        }
        if self.h_function != *function_hash {
            return Err(ReceiptMismatch::Function);
        }
        if self.h_output != result.digest() {
            return Err(ReceiptMismatch::Output);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ReceiptMismatch {
    #[error("receipt signature does not verify")]
    Signature,
    #[error("receipt input digest does not match")]
    Input,
    #[error("receipt function digest does not match")]
    Function,
    #[error("receipt output digest does not match")]
    Output,
}

impl Canonical for Receipt {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.h_input)
            .value(&self.h_function)
            .value(&self.h_output)
            .option(self.h_measurement.as_ref())
            .value(&self.keyset_id)
            .value(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            h_input: dec.value()?,
            h_function: dec.value()?,
            h_output: dec.value()?,
            h_measurement: dec.option()?,
            keyset_id: dec.value()?,
            signature: dec.value()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponsePayload {
    pub result: InvocationResult,
    pub nonce: Digest,
    pub measurement: Option<SignedMeasurement>,
    pub receipt: Option<Receipt>,
}

impl Canonical for ResponsePayload {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.result)
            .value(&self.nonce)
            .option(self.measurement.as_ref())
            .option(self.receipt.as_ref());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            result: dec.value()?,
            nonce: dec.value()?,
            measurement: dec.option()?,
            receipt: dec.option()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedResponse {
    pub aead_nonce: AeadNonce,
    pub ciphertext: Vec<u8>,
}

impl Canonical for EncryptedResponse {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.aead_nonce).bytes(&self.ciphertext);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            aead_nonce: dec.value()?,
            ciphertext: dec.bytes()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpenError {
    #[error("response failed authentication")]
    Tamper,
    #[error("response payload malformed: {0}")]
    Format(CodecError),
}

pub fn open_response(key: &SessionKey, response: &EncryptedResponse) -> Result<ResponsePayload, OpenError> {
    let plain = aead_open(key, &response.aead_nonce, &response.ciphertext, RESPONSE_AAD)
        .map_err(|_| OpenError::Tamper)?;
    ResponsePayload::from_canonical_bytes(&plain).map_err(OpenError::Format)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SetupError {
    #[error("key distribution refused: {0}")]
    Kde(KdeRejection),
    #[error("key delivery failed: {0}")]
    Delivery(DeliveryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkerError {
    #[error("worker has no key set")]
    NotSetUp,
    #[error("no function loaded")]
    NotInitialized,
    #[error("an invocation is already in flight")]
    Busy,
    #[error("no invocation to finish")]
    NoPending,
    #[error("function load failed: {0}")]
    Load(LoadError),
    #[error("request failed authentication")]
    Tamper,
    #[error("request payload malformed: {0}")]
    Malformed(CodecError),
    #[error("request names a different function")]
    WrongFunction,
    #[error("execution failed: {0}")]
    Runtime(RuntimeError),
}

/// How setup obtained its keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetupPath {
    Unsealed,
    Fetched,
}

struct Pending {
    key: SessionKey,
    payload: RequestPayload,
    run: MeteredRun,
}

/// One worker enclave instance.
pub struct WorkerEnclave {
    identity: EnclaveIdentity,
    platform: Platform,
    quoting: AttestationRoot,
    config: RunConfig,
    keyset: Option<KeySet>,
    image: Option<FunctionImage>,
    pending: Option<Pending>,
    rng: ChaCha20Rng,
    last_run: Option<MeteredRun>,
}

impl std::fmt::Debug for WorkerEnclave {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerEnclave")
            .field("identity", &self.identity)
            .field("keyset", &self.keyset)
            .finish_non_exhaustive()
    }
}

impl WorkerEnclave {
    /// `quoting` is the platform's attestation service, used to produce
    /// reports for the KDE.
    pub fn new(
        identity: EnclaveIdentity,
        platform: Platform,
        quoting: AttestationRoot,
        config: RunConfig,
        seed: u64,
    ) -> Self {
        Self {
            identity,
            platform,
            quoting,
            config,
            keyset: None,
            image: None,
            pending: None,
            rng: seeded_rng(seed),
            last_run: None,
        }
    }

    pub fn identity(&self) -> &EnclaveIdentity {
        &self.identity
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn keyset_id(&self) -> Option<Digest> {
        self.keyset.as_ref().map(|k| k.keyset_id)
    }

    pub fn function_hash(&self) -> Option<Digest> {
        self.image.as_ref().map(|i| i.function_hash)
    }

    /// Simulation record of the most recent invocation; host-visible.
    pub fn last_run(&self) -> Option<&MeteredRun> {
        self.last_run.as_ref()
    }

    pub fn ecall_setup(
        &mut self,
        kde: &mut Kde,
        sealed: Option<&SealedBlob>,
    ) -> Result<(SealedBlob, SetupPath), SetupError> {
        if let Some(blob) = sealed {
            let opened = unseal(blob, &self.identity, &self.platform)
                .ok()
                .and_then(|b| KeySet::from_secret_bytes(&b).ok());
            if let Some(keyset) = opened {
                self.keyset = Some(keyset);
                return Ok((blob.clone(), SetupPath::Unsealed));
            }
        }
        self.keyset = None;
        let transport = AgreementKeyPair::generate(&mut self.rng);
        let report = worker_report(
            &self.quoting,
            self.identity,
            kde.challenge(),
            transport.public(),
        );
        let delivery = kde.distribute(&report).map_err(SetupError::Kde)?;
        let keyset = open_delivery(&transport, &self.identity.mrenclave, &delivery)
            .map_err(SetupError::Delivery)?;
        let blob = seal(
            &keyset.secret_bytes(),
            &self.identity,
            &self.platform,
            &mut self.rng,
        );
        self.keyset = Some(keyset);
        Ok((blob, SetupPath::Fetched))
    }

    pub fn ecall_init(&mut self, function: &[u8]) -> Result<Digest, WorkerError> {
        if self.keyset.is_none() {
            return Err(WorkerError::NotSetUp);
        }
        let image = vm_load(function).map_err(WorkerError::Load)?;
        let h = image.function_hash;
        self.image = Some(image);
        Ok(h)
    }

    /// Returns the size of the result the host must buffer.
    pub fn ecall_run(
        &mut self,
        request: &EncryptedRequest,
        interrupts: &[HostInterrupt],
    ) -> Result<u64, WorkerError> {
        let keyset = self.keyset.as_ref().ok_or(WorkerError::NotSetUp)?;
        let image = self.image.as_ref().ok_or(WorkerError::NotInitialized)?;
        if self.pending.is_some() {
            return Err(WorkerError::Busy);
        }
        let key = derive_session_key(&keyset.k_ka, &request.client_pub)
            .map_err(|_| WorkerError::Tamper)?;
        let plain = aead_open(
            &key,
            &request.aead_nonce,
            &request.ciphertext,
            &request_aad(&request.client_pub),
        )
        .map_err(|_| WorkerError::Tamper)?;
        let payload = RequestPayload::from_canonical_bytes(&plain).map_err(WorkerError::Malformed)?;

        let run_request = RunRequest {
            image,
            input: &payload.input,
            expected_hash: payload.function_hash,
            default_tag: tag_for_token(payload.token.as_deref()),
        };
        let run = run_metered(&run_request, &self.config, interrupts).map_err(WorkerError::Runtime)?;
        let size = match &run.outcome {
            RunOutcome::Executed(r) => r.output.len() as u64,
            RunOutcome::WrongFunction => 0,
        };
        let wrong = run.outcome == RunOutcome::WrongFunction;
        self.last_run = Some(run.clone());
        self.pending = Some(Pending { key, payload, run });
        if wrong {
            Err(WorkerError::WrongFunction)
        } else {
            Ok(size)
        }
    }

    pub fn ecall_finish(&mut self) -> Result<(EncryptedResponse, SignedMeasurement), WorkerError> {
        let keyset = self.keyset.as_ref().ok_or(WorkerError::NotSetUp)?;
        let image = self.image.as_ref().ok_or(WorkerError::NotInitialized)?;
        let Pending { key, payload, run } = self.pending.take().ok_or(WorkerError::NoPending)?;

        let measurement = build_signed_measurement(
            Measurement::new(
                run.t_max,
                run.tau,
                run.m_int,
                run.m_max,
                run.net,
                run.tag,
                keyset.keyset_id,
            ),
            &keyset.k_res,
        );
        let result = match run.outcome {
            RunOutcome::Executed(r) => match r.status {
                VmStatus::Ok => InvocationResult::Output(r.output),
                VmStatus::Trapped(reason) => InvocationResult::Error(reason.to_string()),
            },
            RunOutcome::WrongFunction => {
                InvocationResult::Error("request names a different function".into())
            }
        };
        let receipt = payload.receipt.then(|| {
            let h_input = hash(&payload.input);
            let h_output = result.digest();
            let h_measurement = payload.want_measurement.then(|| measurement.digest());
            let body = Receipt::body(
                &h_input,
                &image.function_hash,
                &h_output,
                h_measurement.as_ref(),
                &keyset.keyset_id,
            );
            Receipt {
                h_input,
                h_function: image.function_hash,
                h_output,
                h_measurement,
                keyset_id: keyset.keyset_id,
                signature: sign(&keyset.k_out, &body),
            }
        });
        let response = ResponsePayload {
            result,
            nonce: payload.nonce,
            measurement: payload.want_measurement.then_some(measurement),
            receipt,
        };
        let aead_nonce = AeadNonce::random(&mut self.rng);
        let ciphertext = aead_seal(&key, &aead_nonce, &response.to_canonical_bytes(), RESPONSE_AAD);
        Ok((
            EncryptedResponse {
                aead_nonce,
                ciphertext,
            },
            measurement,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SigningKeyPair;
    use crate::vm::{assemble, corpus};

    struct World {
        root: AttestationRoot,
        kde: Kde,
        signer: VerifyingKey,
    }

    fn world() -> World {
        let root = AttestationRoot::from_seed(1);
        let signer = SigningKeyPair::from_seed(2).public();
        let kde = Kde::new(
            root.clone(),
            kde_identity(&signer),
            worker_identity(&signer).mrenclave,
            3,
        );
        World { root, kde, signer }
    }

    fn worker(w: &World, platform: u64, seed: u64) -> WorkerEnclave {
        let mut config = RunConfig::with_timer(50, 0).unwrap();
        config.network = crate::runtime::NetworkModel::fixed(100);
        WorkerEnclave::new(
            worker_identity(&w.signer),
            Platform::from_seed(platform),
            w.root.clone(),
            config,
            seed,
        )
    }

    fn payload(input: Vec<u8>, function_hash: Digest) -> RequestPayload {
        RequestPayload {
            input,
            function_hash,
            receipt: true,
            want_measurement: true,
            nonce: hash(b"nonce-1"),
            token: Some(b"client-token".to_vec()),
        }
    }

    fn ready(w: &mut World, code: &[u8]) -> WorkerEnclave {
        let mut wk = worker(w, 9, 4);
        wk.ecall_setup(&mut w.kde, None).unwrap();
        wk.ecall_init(code).unwrap();
        wk
    }

    #[test]
    fn setup_fetches_then_unseals() {
        let mut w = world();
        let mut wk = worker(&w, 9, 4);
        let (blob, path) = wk.ecall_setup(&mut w.kde, None).unwrap();
        assert_eq!(path, SetupPath::Fetched);
        let mut again = worker(&w, 9, 5);
        let (_, path) = again.ecall_setup(&mut w.kde, Some(&blob)).unwrap();
        assert_eq!(path, SetupPath::Unsealed);
        assert_eq!(again.keyset_id(), wk.keyset_id());

        let mut other_platform = worker(&w, 10, 6);
        let (_, path) = other_platform.ecall_setup(&mut w.kde, Some(&blob)).unwrap();
        assert_eq!(path, SetupPath::Fetched);
    }

    #[test]
    fn rejected_identity_keeps_no_keys() {
        let mut w = world();
        let rogue_identity = EnclaveIdentity::measure(b"rogue", b"", None, &w.signer);
        let mut rogue = WorkerEnclave::new(
            rogue_identity,
            Platform::from_seed(9),
            w.root.clone(),
            RunConfig::default(),
            1,
        );
        assert_eq!(
            rogue.ecall_setup(&mut w.kde, None).unwrap_err(),
            SetupError::Kde(KdeRejection::Identity)
        );
        assert_eq!(rogue.keyset_id(), None);
        assert_eq!(rogue.ecall_init(&assemble(corpus::EMPTY).unwrap()), Err(WorkerError::NotSetUp));
    }

    #[test]
    fn honest_round_trip_with_receipt() {
        let mut w = world();
        let code = assemble(corpus::FIB).unwrap();
        let mut wk = ready(&mut w, &code);
        let fh = hash(&code);
        let client = AgreementKeyPair::from_seed(70);
        let pl = payload(corpus::input(&[10]), fh);
        let (req, key) = seal_request(&client, &w.kde.published().keys.ka, &pl, &mut seeded_rng(1)).unwrap();
        assert_eq!(wk.ecall_run(&req, &[]).unwrap(), 8);
        let (resp, measurement) = wk.ecall_finish().unwrap();
        let body = open_response(&key, &resp).unwrap();
        assert_eq!(body.nonce, pl.nonce);
        assert_eq!(body.result, InvocationResult::Output(55u64.to_le_bytes().to_vec()));
        let published = w.kde.published();
        assert!(measurement.verify(&published.keys.res));
        assert_eq!(measurement.tag, hash(b"client-token"));
        assert_eq!(body.measurement, Some(measurement));
        let receipt = body.receipt.unwrap();
        receipt
            .verify_for(&published.keys.out, &pl.input, &fh, &body.result)
            .unwrap();
        assert_eq!(receipt.h_measurement, Some(measurement.digest()));
        assert_eq!(wk.ecall_finish().unwrap_err(), WorkerError::NoPending);
    }

    #[test]
    fn tampered_request_is_not_billable() {
        let mut w = world();
        let code = assemble(corpus::FIB).unwrap();
        let mut wk = ready(&mut w, &code);
        let client = AgreementKeyPair::from_seed(70);
        let (mut req, _) = seal_request(
            &client,
            &w.kde.published().keys.ka,
            &payload(corpus::input(&[10]), hash(&code)),
            &mut seeded_rng(1),
        )
        .unwrap();
        req.ciphertext[3] ^= 0x40;
        assert_eq!(wk.ecall_run(&req, &[]), Err(WorkerError::Tamper));
        assert_eq!(wk.ecall_finish().unwrap_err(), WorkerError::NoPending);
        assert!(wk.last_run().is_none());
    }

    #[test]
    fn wrong_function_aborts_before_execution() {
        let mut w = world();
        let code = assemble(corpus::FIB).unwrap();
        let mut wk = ready(&mut w, &code);
        let client = AgreementKeyPair::from_seed(70);
        let other = hash(&assemble(corpus::EMPTY).unwrap());
        let (req, key) = seal_request(
            &client,
            &w.kde.published().keys.ka,
            &payload(corpus::input(&[10]), other),
            &mut seeded_rng(1),
        )
        .unwrap();
        assert_eq!(wk.ecall_run(&req, &[]), Err(WorkerError::WrongFunction));
        assert_eq!(wk.last_run().unwrap().vm_instructions, 0);
        let (resp, _) = wk.ecall_finish().unwrap();
        assert!(matches!(
            open_response(&key, &resp).unwrap().result,
            InvocationResult::Error(_)
        ));
    }

    #[test]
    fn trapped_run_still_signs_measurement() {
        let mut w = world();
        let code = assemble("PUSH 64\nALLOC\nPOP\nPUSH 1\nPUSH 0\nDIV\nHALT").unwrap();
        let mut wk = ready(&mut w, &code);
        let client = AgreementKeyPair::from_seed(70);
        let (req, key) = seal_request(
            &client,
            &w.kde.published().keys.ka,
            &payload(vec![], hash(&code)),
            &mut seeded_rng(1),
        )
        .unwrap();
        wk.ecall_run(&req, &[]).unwrap();
        let (resp, m) = wk.ecall_finish().unwrap();
        let body = open_response(&key, &resp).unwrap();
        assert!(matches!(body.result, InvocationResult::Error(ref e) if e.contains("division")));
        assert!(m.verify(&w.kde.published().keys.res));
        assert_eq!(m.m_max, 64);
        assert_eq!(m.tag, hash(b"client-token"));
        let receipt = body.receipt.unwrap();
        receipt
            .verify_for(&w.kde.published().keys.out, &[], &hash(&code), &body.result)
            .unwrap();
    }

    #[test]
    fn lifecycle_order_is_enforced() {
        let mut w = world();
        let mut wk = worker(&w, 9, 4);
        let client = AgreementKeyPair::from_seed(70);
        let (req, _) = seal_request(
            &client,
            &w.kde.published().keys.ka,
            &payload(vec![], Digest([0; 32])),
            &mut seeded_rng(1),
        )
        .unwrap();
        assert_eq!(wk.ecall_run(&req, &[]), Err(WorkerError::NotSetUp));
        wk.ecall_setup(&mut w.kde, None).unwrap();
        assert_eq!(wk.ecall_run(&req, &[]), Err(WorkerError::NotInitialized));
        assert!(matches!(wk.ecall_init(b"junk"), Err(WorkerError::Load(_))));
        let first = wk.ecall_init(&assemble(corpus::EMPTY).unwrap()).unwrap();
        let second = wk.ecall_init(&assemble(corpus::FIB).unwrap()).unwrap();
        assert_ne!(first, second);
        assert_eq!(wk.function_hash(), Some(second));
    }

    #[test]
    fn no_plaintext_in_host_visible_data() {
        let mut w = world();
        let echo = assemble("ARG 0\nOUT\nARG 1\nOUT\nHALT").unwrap();
        let mut wk = ready(&mut w, &echo);
        let sentinel = b"SENTINEL-PLAINTX".to_vec();
        let client = AgreementKeyPair::from_seed(70);
        let (req, key) = seal_request(
            &client,
            &w.kde.published().keys.ka,
            &payload(sentinel.clone(), hash(&echo)),
            &mut seeded_rng(1),
        )
        .unwrap();
        wk.ecall_run(&req, &[]).unwrap();
        let (resp, m) = wk.ecall_finish().unwrap();
        assert_eq!(
            open_response(&key, &resp).unwrap().result,
            InvocationResult::Output(sentinel.clone())
        );
        let trace = wk.last_run().unwrap().trace.export_text();
        let host_visible = [
            req.to_canonical_bytes(),
            resp.to_canonical_bytes(),
            m.to_canonical_bytes(),
            trace.into_bytes(),
        ];
        let needle = &sentinel[..8];
        for blob in &host_visible {
            assert!(!blob.windows(needle.len()).any(|win| win == needle));
        }
    }
}
