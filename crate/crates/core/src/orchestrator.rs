//! Client protocol, worker pool, measurement collection and billing.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::attestation::{verify_transitive, AttestationRoot, TransitiveRejection, TrustedKeys};
use crate::codec::{Canonical, CodecError};
use crate::crypto::{hash, seeded_rng, AgreementKeyPair, Digest, SessionKey, SigningKeyPair, VerifyingKey};
use crate::kde::{Kde, KdeConfig, Platform, PublishedKeys, SealedBlob};
use crate::metering::SignedMeasurement;
use crate::runtime::{HostInterrupt, RunConfig};
use crate::worker::{
    kde_identity, open_response, seal_request, worker_identity, EncryptedRequest,
    EncryptedResponse, InvocationResult, OpenError, Receipt, ReceiptMismatch, RequestPayload,
    SetupError, WorkerEnclave, WorkerError,
};

/// A client that has verified the KDE's attestation for the keys it uses.
#[derive(Debug, Clone)]
pub struct ClientContext {
    k_c: AgreementKeyPair,
    published: PublishedKeys,
    trusted: TrustedKeys,
}

impl ClientContext {
    pub fn new(
        root: &VerifyingKey,
        published: PublishedKeys,
        expected_kde: &Digest,
        expected_worker: &Digest,
        k_c: AgreementKeyPair,
    ) -> Result<Self, TransitiveRejection> {
        let trusted = verify_transitive(
            root,
            &published.quote,
            expected_kde,
            &published.keys,
            expected_worker,
        )?;
        Ok(Self {
            k_c,
            published,
            trusted,
        })
    }

    pub fn published(&self) -> &PublishedKeys {
        &self.published
    }

    pub fn trusted(&self) -> &TrustedKeys {
        &self.trusted
    }
}

/// Client-side state kept until the matching response arrives.
#[derive(Debug, Clone)]
pub struct PendingInvocation {
    key: SessionKey,
    pub nonce: Digest,
    pub input: Vec<u8>,
    pub function_hash: Digest,
    pub receipt: bool,
    pub want_measurement: bool,
    out_key: VerifyingKey,
    res_key: VerifyingKey,
}

#[derive(Debug, Clone, Default)]
pub struct InvokeOptions {
    pub receipt: bool,
    pub want_measurement: bool,
    pub token: Option<Vec<u8>>,
}

pub fn client_prepare<R: RngCore>(
    ctx: &ClientContext,
    function_hash: Digest,
    input: &[u8],
    options: &InvokeOptions,
    rng: &mut R,
) -> (EncryptedRequest, PendingInvocation) {
    let mut n = [0u8; 32];
    rng.fill_bytes(&mut n);
    let payload = RequestPayload {
        input: input.to_vec(),
        function_hash,
        receipt: options.receipt,
        want_measurement: options.want_measurement,
        nonce: Digest(n),
        token: options.token.clone(),
    };
    let (request, key) = seal_request(&ctx.k_c, &ctx.trusted.keys.ka, &payload, rng)
        .expect("verified agreement key is contributory");
    (
        request,
        PendingInvocation {
            key,
            nonce: payload.nonce,
            input: payload.input,
            function_hash,
            receipt: options.receipt,
            want_measurement: options.want_measurement,
            out_key: ctx.trusted.keys.out,
            res_key: ctx.trusted.keys.res,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientOutcome {
    pub output: Vec<u8>,
    pub receipt: Option<Receipt>,
    pub measurement: Option<SignedMeasurement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("response failed authentication")]
    Tamper,
    #[error("response malformed: {0}")]
    Format(CodecError),
    #[error("response nonce does not match the request (replay)")]
    Replay,
    #[error("function failed: {0}")]
    FunctionFailed(String),
    #[error("receipt rejected: {0}")]
    Receipt(ReceiptMismatch),
    #[error("receipt was requested but not returned")]
    MissingReceipt,
    #[error("returned measurement does not verify")]
    Measurement,
}

pub fn client_verify_response(
    pending: &PendingInvocation,
    response: &EncryptedResponse,
) -> Result<ClientOutcome, ClientError> {
    let body = open_response(&pending.key, response).map_err(|e| match e {
        OpenError::Tamper => ClientError::Tamper,
        OpenError::Format(c) => ClientError::Format(c),
    })?;
    if body.nonce != pending.nonce {
        return Err(ClientError::Replay);
    }
    if let Some(m) = &body.measurement {
        if !m.verify(&pending.res_key) {
            return Err(ClientError::Measurement);
        }
    }
    match (&body.receipt, pending.receipt) {
        (Some(r), _) => r
            .verify_for(&pending.out_key, &pending.input, &pending.function_hash, &body.result)
            .map_err(ClientError::Receipt)?,
        (None, true) => return Err(ClientError::MissingReceipt),
        (None, false) => {}
    }
    match body.result {
        InvocationResult::Output(output) => Ok(ClientOutcome {
            output,
            receipt: body.receipt,
            measurement: body.measurement,
        }),
        InvocationResult::Error(reason) => Err(ClientError::FunctionFailed(reason)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct KeyEntry {
    out: VerifyingKey,
    res: VerifyingKey,
    epoch: u64,
}

/// Key sets a relying party has verified transitively, current and retired.
#[derive(Debug, Clone, Default)]
pub struct Keyring {
    entries: HashMap<Digest, KeyEntry>,
    latest_epoch: u64,
}

impl Keyring {
    pub fn new(
        root: &VerifyingKey,
        expected_kde: &Digest,
        expected_worker: &Digest,
        published: &[PublishedKeys],
    ) -> Result<Self, TransitiveRejection> {
        let mut ring = Self::default();
        for p in published {
            let t = verify_transitive(root, &p.quote, expected_kde, &p.keys, expected_worker)?;
            ring.latest_epoch = ring.latest_epoch.max(t.epoch);
            ring.entries.insert(
                p.keyset_id(),
                KeyEntry {
                    out: t.keys.out,
                    res: t.keys.res,
                    epoch: t.epoch,
                },
            );
        }
        Ok(ring)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn out_key(&self, keyset_id: &Digest) -> Option<&VerifyingKey> {
        self.entries.get(keyset_id).map(|e| &e.out)
    }

    pub fn res_key(&self, keyset_id: &Digest) -> Option<&VerifyingKey> {
        self.entries.get(keyset_id).map(|e| &e.res)
    }

    pub fn epoch(&self, keyset_id: &Digest) -> Option<u64> {
        self.entries.get(keyset_id).map(|e| e.epoch)
    }

    pub fn is_retired(&self, keyset_id: &Digest) -> bool {
        self.epoch(keyset_id).is_some_and(|e| e < self.latest_epoch)
    }
}

/// A measurement that passed provider verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifiedMeasurement {
    report: SignedMeasurement,
    pub epoch: u64,
}

impl VerifiedMeasurement {
    pub fn report(&self) -> &SignedMeasurement {
        &self.report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderRejection {
    #[error("forged measurement: signature does not verify under a known key set")]
    Forgery,
    #[error("spurious invocation: tag is not one the provider issued")]
    SpuriousInvocation,
}

pub fn provider_verify_measurement(
    report: &SignedMeasurement,
    keyring: &Keyring,
    expected_tags: &HashSet<Digest>,
) -> Result<VerifiedMeasurement, ProviderRejection> {
    let entry = keyring
        .entries
        .get(&report.keyset_id)
        .ok_or(ProviderRejection::Forgery)?;
    if !report.verify(&entry.res) {
        return Err(ProviderRejection::Forgery);
    }
    if !expected_tags.contains(&report.tag) {
        return Err(ProviderRejection::SpuriousInvocation);
    }
    Ok(VerifiedMeasurement {
        report: *report,
        epoch: entry.epoch,
    })
}

/// Decimal units per GB.
pub const GB: u128 = 1_000_000_000;
/// Cycles per GHz-second.
pub const GHZ: u128 = 1_000_000_000;

/// Prices in micro-units of currency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BillingPolicy {
    pub per_invocation: u64,
    pub per_ghz_second: u64,
    pub per_gb_second: u64,
    pub per_gb_network: u64,
    /// Cycles per second assumed when converting to seconds.
    pub cpu_frequency_hz: u64,
}

impl Default for BillingPolicy {
    fn default() -> Self {
        Self {
            per_invocation: 0,
            per_ghz_second: 0,
            per_gb_second: 0,
            per_gb_network: 0,
            cpu_frequency_hz: 1_000_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value}")]
    BadValue { key: String, value: String },
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl BillingPolicy {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut policy = Self::default();
        for (k, v) in parse_key_values(text)? {
            let n: u64 = v.parse().map_err(|_| ConfigError::BadValue {
                key: k.clone(),
                value: v.clone(),
            })?;
            match k.as_str() {
                "per_invocation" => policy.per_invocation = n,
                "per_ghz_second" => policy.per_ghz_second = n,
                "per_gb_second" => policy.per_gb_second = n,
                "per_gb_network" => policy.per_gb_network = n,
                "cpu_frequency_hz" if n > 0 => policy.cpu_frequency_hz = n,
                "cpu_frequency_hz" => return Err(ConfigError::BadValue { key: k, value: v }),
                _ => return Err(ConfigError::UnknownKey(k)),
            }
        }
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineItem {
    /// Base units: invocations, cycles, byte-cycles or bytes.
    pub quantity: u128,
    pub charge: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invoice {
    pub policy: BillingPolicy,
    pub invocations: LineItem,
    pub compute: LineItem,
    pub memory: LineItem,
    pub network: LineItem,
    pub total: u128,
    pub reports: Vec<Digest>,
}

impl Invoice {
    pub fn compute_seconds(&self) -> f64 {
        self.compute.quantity as f64 / self.policy.cpu_frequency_hz as f64
    }

    pub fn memory_gb_seconds(&self) -> f64 {
        self.memory.quantity as f64 / self.policy.cpu_frequency_hz as f64 / GB as f64
    }

    pub fn network_gb(&self) -> f64 {
        self.network.quantity as f64 / GB as f64
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "invocations   {:>24}  charge {}\n",
            self.invocations.quantity, self.invocations.charge
        ));
        out.push_str(&format!(
            "compute       {:>24} cycles ({:.6} s)  charge {}\n",
            self.compute.quantity,
            self.compute_seconds(),
            self.compute.charge
        ));
        out.push_str(&format!(
            "memory        {:>24} byte-cycles ({:.9} GB-s)  charge {}\n",
            self.memory.quantity,
            self.memory_gb_seconds(),
            self.memory.charge
        ));
        out.push_str(&format!(
            "network       {:>24} bytes ({:.9} GB)  charge {}\n",
            self.network.quantity,
            self.network_gb(),
            self.network.charge
        ));
        out.push_str(&format!("total (micro-units) {}\n", self.total));
        for d in &self.reports {
            out.push_str(&format!("report {d}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BillingError {
    #[error("billing arithmetic overflowed")]
    Overflow,
    #[error("policy frequency must be positive")]
    ZeroFrequency,
}

fn checked_charge(quantity: u128, price: u64, divisor: u128) -> Result<u128, BillingError> {
    quantity
        .checked_mul(price as u128)
        .map(|v| v / divisor)
        .ok_or(BillingError::Overflow)
}

/// Sums per-report usage in exact integers, then prices each metric once
/// with truncating division.
pub fn compute_invoice(
    reports: &[VerifiedMeasurement],
    policy: &BillingPolicy,
) -> Result<Invoice, BillingError> {
    if policy.cpu_frequency_hz == 0 {
        return Err(BillingError::ZeroFrequency);
    }
    let (mut cycles, mut byte_cycles, mut bytes) = (0u128, 0u128, 0u128);
    for r in reports {
        let m = r.report();
        let tau = m.tau as u128;
        cycles = (m.t_max as u128)
            .checked_mul(tau)
            .and_then(|c| cycles.checked_add(c))
            .ok_or(BillingError::Overflow)?;
        byte_cycles = (m.m_int as u128)
            .checked_mul(tau)
            .and_then(|c| byte_cycles.checked_add(c))
            .ok_or(BillingError::Overflow)?;
        bytes += m.net as u128;
    }
    let count = reports.len() as u128;
    let freq = policy.cpu_frequency_hz as u128;
    let invocations = LineItem {
        quantity: count,
        charge: checked_charge(count, policy.per_invocation, 1)?,
    };
    let compute = LineItem {
        quantity: cycles,
        charge: checked_charge(cycles, policy.per_ghz_second, GHZ)?,
    };
    let memory = LineItem {
        quantity: byte_cycles,
        charge: checked_charge(
            byte_cycles,
            policy.per_gb_second,
            freq.checked_mul(GB).ok_or(BillingError::Overflow)?,
        )?,
    };
    let network = LineItem {
        quantity: bytes,
        charge: checked_charge(bytes, policy.per_gb_network, GB)?,
    };
    let total = [invocations, compute, memory, network]
        .iter()
        .try_fold(0u128, |acc, l| acc.checked_add(l.charge))
        .ok_or(BillingError::Overflow)?;
    Ok(Invoice {
        policy: *policy,
        invocations,
        compute,
        memory,
        network,
        total,
        reports: reports.iter().map(|r| r.report().digest()).collect(),
    })
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("measurement log I/O: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn encode_report_line(report: &SignedMeasurement) -> String {
    hex::encode(report.to_canonical_bytes())
}

pub fn decode_report_line(line: &str) -> Result<SignedMeasurement, String> {
    let bytes = hex::decode(line.trim()).map_err(|e| e.to_string())?;
    SignedMeasurement::from_canonical_bytes(&bytes).map_err(|e| e.to_string())
}

/// Append-only file of hex-encoded signed measurements, one per line.
#[derive(Debug)]
pub struct MeasurementLog {
    path: PathBuf,
    file: File,
}

impl MeasurementLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, report: &SignedMeasurement) -> Result<(), LogError> {
        writeln!(self.file, "{}", encode_report_line(report))?;
        self.file.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<SignedMeasurement>, LogError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                decode_report_line(&line).map_err(|message| LogError::Parse {
                    line: i + 1,
                    message,
                })?,
            );
        }
        Ok(out)
    }
}

/// When measurements reach the provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryMode {
    Immediate,
    EndOfPeriod { invocations: usize },
}

#[derive(Debug)]
pub struct MeasurementCollector {
    mode: DeliveryMode,
    held: Vec<SignedMeasurement>,
    delivered: Vec<SignedMeasurement>,
    log: Option<MeasurementLog>,
}

impl MeasurementCollector {
    pub fn new(mode: DeliveryMode, log: Option<MeasurementLog>) -> Self {
        Self {
            mode,
            held: Vec::new(),
            delivered: Vec::new(),
            log,
        }
    }

    /// Returns the measurements released to the provider by this call.
    pub fn submit(&mut self, report: SignedMeasurement) -> Result<Vec<SignedMeasurement>, LogError> {
        self.held.push(report);
        match self.mode {
            DeliveryMode::Immediate => self.close_period(),
            DeliveryMode::EndOfPeriod { invocations } if self.held.len() >= invocations => {
                self.close_period()
            }
            DeliveryMode::EndOfPeriod { .. } => Ok(Vec::new()),
        }
    }

    pub fn close_period(&mut self) -> Result<Vec<SignedMeasurement>, LogError> {
        let batch = std::mem::take(&mut self.held);
        if let Some(log) = self.log.as_mut() {
            for r in &batch {
                log.append(r)?;
            }
        }
        self.delivered.extend_from_slice(&batch);
        Ok(batch)
    }

    pub fn delivered(&self) -> &[SignedMeasurement] {
        &self.delivered
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }
}

/// Adversarial delivery behaviour of an untrusted message path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShimConfig {
    pub drop_per_mille: u16,
    pub duplicate_per_mille: u16,
    pub reorder: bool,
    pub seed: u64,
}

/// In-process message queue with optional loss, duplication and reordering.
#[derive(Debug)]
pub struct LossyChannel<T> {
    queue: VecDeque<T>,
    config: ShimConfig,
    rng: ChaCha20Rng,
    dropped: u64,
}

impl<T: Clone> LossyChannel<T> {
    pub fn new(config: ShimConfig) -> Self {
        Self {
            queue: VecDeque::new(),
            config,
            rng: seeded_rng(config.seed),
            dropped: 0,
        }
    }

    pub fn reliable() -> Self {
        Self::new(ShimConfig::default())
    }

    pub fn send(&mut self, msg: T) {
        if self.rng.gen_range(0..1000) < self.config.drop_per_mille {
            self.dropped += 1;
            return;
        }
        if self.rng.gen_range(0..1000) < self.config.duplicate_per_mille {
            self.queue.push_back(msg.clone());
        }
        self.queue.push_back(msg);
    }

    pub fn recv(&mut self) -> Option<T> {
        if self.config.reorder && self.queue.len() > 1 {
            let i = self.rng.gen_range(0..self.queue.len());
            return self.queue.remove(i);
        }
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// What happens to requests beyond the pool's capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overflow {
    Queue,
    Reject,
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub max_workers: usize,
    pub overflow: Overflow,
    pub run: RunConfig,
    pub platform_seed: u64,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            max_workers: 4,
            overflow: Overflow::Queue,
            run: RunConfig::default(),
            platform_seed: 7,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartKind {
    /// New worker: key setup and function load.
    Cold,
    /// Idle worker re-provisioned with a different function.
    Reprovisioned,
    Warm,
    /// Warm worker whose key set had been rotated out.
    Refreshed,
}

#[derive(Debug, Clone)]
pub struct Dispatched {
    pub response: EncryptedResponse,
    pub measurement: SignedMeasurement,
    pub start: StartKind,
    pub worker: usize,
    pub wrong_function: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("no worker available")]
    NoWorkerAvailable,
    #[error("worker setup failed: {0}")]
    Setup(SetupError),
    #[error("worker refused the invocation: {0}")]
    Worker(WorkerError),
}

struct PooledWorker {
    enclave: WorkerEnclave,
    function: Option<Digest>,
}

/// Worker instances on one platform sharing a sealed key blob.
pub struct WorkerPool {
    config: PoolConfig,
    root: AttestationRoot,
    identity: crate::attestation::EnclaveIdentity,
    platform: Platform,
    workers: Vec<PooledWorker>,
    sealed: Option<SealedBlob>,
    spawned: u64,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("workers", &self.workers.len())
            .finish_non_exhaustive()
    }
}

impl WorkerPool {
    pub fn new(
        config: PoolConfig,
        root: AttestationRoot,
        identity: crate::attestation::EnclaveIdentity,
    ) -> Self {
        assert!(config.max_workers >= 1);
        let platform = Platform::from_seed(config.platform_seed);
        Self {
            config,
            root,
            identity,
            platform,
            workers: Vec::new(),
            sealed: None,
            spawned: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn worker(&self, i: usize) -> Option<&WorkerEnclave> {
        self.workers.get(i).map(|w| &w.enclave)
    }

    fn ensure_current_keys(&mut self, i: usize, kde: &mut Kde) -> Result<bool, DispatchError> {
        let current = kde.published().keyset_id();
        if self.workers[i].enclave.keyset_id() == Some(current) {
            return Ok(false);
        }
        let sealed = self.sealed.clone();
        let (blob, _) = self.workers[i]
            .enclave
            .ecall_setup(kde, sealed.as_ref())
            .map_err(DispatchError::Setup)?;
        if self.workers[i].enclave.keyset_id() != Some(current) {
            let (blob, _) = self.workers[i]
                .enclave
                .ecall_setup(kde, None)
                .map_err(DispatchError::Setup)?;
            self.sealed = Some(blob);
        } else {
            self.sealed = Some(blob);
        }
        Ok(true)
    }

    fn load(&mut self, i: usize, function: &[u8]) -> Result<(), DispatchError> {
        let h = self.workers[i]
            .enclave
            .ecall_init(function)
            .map_err(DispatchError::Worker)?;
        self.workers[i].function = Some(h);
        Ok(())
    }

    fn acquire(
        &mut self,
        kde: &mut Kde,
        function: &[u8],
        taken: &[usize],
    ) -> Result<(usize, StartKind), DispatchError> {
        let h = hash(function);
        let idle = |i: &usize| !taken.contains(i);
        if let Some(i) = (0..self.workers.len())
            .filter(idle)
            .find(|&i| self.workers[i].function == Some(h))
        {
            let refreshed = self.ensure_current_keys(i, kde)?;
            return Ok((i, if refreshed { StartKind::Refreshed } else { StartKind::Warm }));
        }
        if self.workers.len() < self.config.max_workers {
            let seed = self.config.seed.wrapping_add(self.spawned);
            self.spawned += 1;
            self.workers.push(PooledWorker {
                enclave: WorkerEnclave::new(
                    self.identity,
                    self.platform.clone(),
                    self.root.clone(),
                    self.config.run.clone(),
                    seed,
                ),
                function: None,
            });
            let i = self.workers.len() - 1;
            if let Err(e) = self.ensure_current_keys(i, kde).and_then(|_| self.load(i, function)) {
                self.workers.pop();
                return Err(e);
            }
            return Ok((i, StartKind::Cold));
        }
        if let Some(i) = (0..self.workers.len()).find(idle) {
            self.ensure_current_keys(i, kde)?;
            self.load(i, function)?;
            return Ok((i, StartKind::Reprovisioned));
        }
        Err(DispatchError::NoWorkerAvailable)
    }

    pub fn dispatch(
        &mut self,
        kde: &mut Kde,
        function: &[u8],
        request: &EncryptedRequest,
        interrupts: &[HostInterrupt],
    ) -> Result<Dispatched, DispatchError> {
        let (i, start) = self.acquire(kde, function, &[])?;
        invoke_worker(&mut self.workers[i].enclave, request, interrupts).map(|(r, m, wrong)| {
            Dispatched {
                response: r,
                measurement: m,
                start,
                worker: i,
                wrong_function: wrong,
            }
        })
    }

    /// Serves several invocations of one function, each on its own worker
    /// instance, in parallel threads.
    pub fn dispatch_concurrent(
        &mut self,
        kde: &mut Kde,
        function: &[u8],
        requests: &[EncryptedRequest],
    ) -> Vec<Result<Dispatched, DispatchError>> {
        let mut results: Vec<Option<Result<Dispatched, DispatchError>>> = vec![None; requests.len()];
        let mut next = 0;
        while next < requests.len() {
            let mut wave: Vec<(usize, usize, StartKind)> = Vec::new();
            let mut taken = Vec::new();
            while next < requests.len() {
                match self.acquire(kde, function, &taken) {
                    Ok((w, start)) => {
                        taken.push(w);
                        wave.push((next, w, start));
                        next += 1;
                    }
                    Err(DispatchError::NoWorkerAvailable) if !wave.is_empty() => break,
                    Err(e) => {
                        results[next] = Some(Err(e));
                        next += 1;
                    }
                }
            }
            let mut slots: Vec<Option<&mut PooledWorker>> =
                self.workers.iter_mut().map(Some).collect();
            let jobs: Vec<_> = wave
                .iter()
                .map(|&(req, w, start)| (req, w, start, slots[w].take().expect("distinct workers")))
                .collect();
            let finished: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .into_iter()
                    .map(|(req, w, start, pooled)| {
                        let request = &requests[req];
                        s.spawn(move || {
                            let out = invoke_worker(&mut pooled.enclave, request, &[]).map(
                                |(r, m, wrong)| Dispatched {
                                    response: r,
                                    measurement: m,
                                    start,
                                    worker: w,
                                    wrong_function: wrong,
                                },
                            );
                            (req, out)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
            });
            for (req, out) in finished {
                results[req] = Some(out);
            }
            if self.config.overflow == Overflow::Reject {
                for slot in results.iter_mut().skip(next) {
                    *slot = Some(Err(DispatchError::NoWorkerAvailable));
                }
                break;
            }
        }
        results
            .into_iter()
            .map(|r| r.unwrap_or(Err(DispatchError::NoWorkerAvailable)))
            .collect()
    }
}

fn invoke_worker(
    enclave: &mut WorkerEnclave,
    request: &EncryptedRequest,
    interrupts: &[HostInterrupt],
) -> Result<(EncryptedResponse, SignedMeasurement, bool), DispatchError> {
    let wrong = match enclave.ecall_run(request, interrupts) {
        Ok(_) => false,
        Err(WorkerError::WrongFunction) => true,
        Err(e) => return Err(DispatchError::Worker(e)),
    };
    let (response, measurement) = enclave.ecall_finish().map_err(DispatchError::Worker)?;
    Ok((response, measurement, wrong))
}

/// A complete simulated deployment: attestation root, KDE and worker pool.
pub struct Deployment {
    pub root: AttestationRoot,
    pub signer: SigningKeyPair,
    pub kde: Kde,
    pub pool: WorkerPool,
}

impl Deployment {
    pub fn new(seed: u64, pool: PoolConfig) -> Self {
        Self::with_kde_config(seed, pool, KdeConfig::default())
    }

    pub fn with_kde_config(seed: u64, pool: PoolConfig, kde_config: KdeConfig) -> Self {
        let root = AttestationRoot::from_seed(seed);
        let signer = SigningKeyPair::from_seed(seed.wrapping_add(1));
        let worker = worker_identity(&signer.public());
        let kde = Kde::with_config(
            root.clone(),
            kde_identity(&signer.public()),
            worker.mrenclave,
            seed.wrapping_add(2),
            kde_config,
        );
        let pool = WorkerPool::new(pool, root.clone(), worker);
        Self {
            root,
            signer,
            kde,
            pool,
        }
    }

    pub fn expected_kde(&self) -> Digest {
        kde_identity(&self.signer.public()).mrenclave
    }

    pub fn expected_worker(&self) -> Digest {
        worker_identity(&self.signer.public()).mrenclave
    }

    pub fn client(&self, k_c: AgreementKeyPair) -> Result<ClientContext, TransitiveRejection> {
        ClientContext::new(
            &self.root.public(),
            self.kde.published(),
            &self.expected_kde(),
            &self.expected_worker(),
            k_c,
        )
    }

    pub fn keyring(&self) -> Result<Keyring, TransitiveRejection> {
        Keyring::new(
            &self.root.public(),
            &self.expected_kde(),
            &self.expected_worker(),
            &self.kde.all_published(),
        )
    }

    pub fn invoke(
        &mut self,
        function: &[u8],
        request: &EncryptedRequest,
        interrupts: &[HostInterrupt],
    ) -> Result<Dispatched, DispatchError> {
        self.pool.dispatch(&mut self.kde, function, request, interrupts)
    }

    pub fn rotate(&mut self, seed: u64) -> PublishedKeys {
        self.kde.rotate(seed)
    }
}
