//! Resource measurement: the transactional timer thread, its ERESUME
//! handler, the memory time-integral, network counting and the signed
//! measurement report.

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{hash, hash_canonical, sign, verify, Digest, Signature, SigningKeyPair, VerifyingKey};
use crate::sim::{
    ActorId, EnclaveCpu, EnclaveProgram, HandlerInfo, HandlerOp, Kernel, Loc, Step, TxOp,
    TxOutcome, TxRequest, MARKER_VALUE,
};

pub const DEFAULT_EPSILON: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimerConfig {
    /// Cycles per tick.
    pub tau: u64,
    /// Cycles the timer spends between transactions.
    pub epsilon: u64,
}

impl TimerConfig {
    pub fn new(tau: u64, epsilon: u64) -> Result<Self, MeterError> {
        if tau == 0 {
            return Err(MeterError::ZeroTau);
        }
        Ok(Self { tau, epsilon })
    }
}

impl Default for TimerConfig {
    fn default() -> Self {
        Self {
            tau: 1000,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MeterError {
    #[error("tick length must be at least one cycle")]
    ZeroTau,
    #[error("free of {freed} bytes exceeds the {live} bytes currently allocated")]
    NegativeMemory { live: u64, freed: u64 },
    #[error("clock went backwards from tick {last} to {now}")]
    ClockRegression { last: u64, now: u64 },
    #[error("memory integral overflowed")]
    Overflow,
    #[error("memory accounting already finalized")]
    Finalized,
}

/// Enclave cells shared by the worker and the timer threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeterCells {
    pub worker: ActorId,
    /// Public tick counter, mirrored from `internal` after each commit.
    pub t: Loc,
    pub internal: Loc,
    pub proc: Loc,
    /// Set while a timer transaction or its bookkeeping is in flight.
    pub busy: Loc,
    pub mutex: Loc,
    pub finished: Loc,
    pub original_rip: Loc,
    pub t_max: Loc,
}

impl MeterCells {
    pub fn allocate(kernel: &mut Kernel, worker: ActorId) -> Self {
        Self {
            worker,
            t: kernel.enclave_cell("t", 0),
            internal: kernel.enclave_cell("internal", 0),
            proc: kernel.enclave_cell("proc", 0),
            busy: kernel.enclave_cell("busy", 0),
            mutex: kernel.enclave_cell("timer_mutex", 0),
            finished: kernel.enclave_cell("finished", 0),
            original_rip: kernel.enclave_cell("original_rip", 0),
            t_max: kernel.enclave_cell("t_max", 0),
        }
    }

    pub fn marker(&self) -> Loc {
        Loc::SsaMarker(self.worker)
    }

    pub fn ssa_rip(&self) -> Loc {
        Loc::SsaRip(self.worker)
    }
}

/// Instructions of the worker's custom ERESUME handler: save two
/// registers, locate the SSA, write the marker, restore, jump back.
pub const HANDLER_INSTRUCTIONS: u64 = 8;

pub fn register_eresume_handler(kernel: &mut Kernel, cells: &MeterCells) -> HandlerInfo {
    kernel.register_handler(vec![
        HandlerOp::Compute(4),
        HandlerOp::Write(cells.marker(), MARKER_VALUE),
        HandlerOp::Compute(2),
        HandlerOp::JumpIndirect(cells.original_rip),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Enter,
    Acquire,
    Loop,
    AfterTx,
    Mirror,
    Recover,
    Done,
}

/// The timer thread. Counts one tick per committed transaction of `tau`
/// cycles that watched the worker's SSA marker.
#[derive(Debug)]
pub struct TimerProgram {
    config: TimerConfig,
    cells: MeterCells,
    handler: HandlerInfo,
    phase: Phase,
    ticks_committed: u64,
}

impl TimerProgram {
    pub fn new(config: TimerConfig, cells: MeterCells, handler: HandlerInfo) -> Self {
        Self {
            config,
            cells,
            handler,
            phase: Phase::Enter,
            ticks_committed: 0,
        }
    }

    pub fn ticks_committed(&self) -> u64 {
        self.ticks_committed
    }

    fn tick(&self) -> Step {
        let marker = self.cells.marker();
        Step::Tx(TxRequest {
            watch: vec![marker],
            body: vec![
                TxOp::Expect(marker, MARKER_VALUE),
                TxOp::Compute(self.config.tau),
                TxOp::Increment(self.cells.internal),
            ],
        })
    }
}

impl EnclaveProgram for TimerProgram {
    fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
        let c = self.cells;
        loop {
            match self.phase {
                Phase::Enter => {
                    cpu.eenter();
                    self.phase = Phase::Acquire;
                }
                Phase::Acquire => {
                    if cpu.read(c.finished) == 1 {
                        self.phase = Phase::Done;
                        continue;
                    }
                    if cpu.read(c.mutex) != 0 {
                        return Step::WaitFor(vec![c.mutex, c.finished]);
                    }
                    cpu.write(c.mutex, 1);
                    cpu.note("timer_active", 1);
                    self.phase = Phase::Loop;
                }
                Phase::Loop => {
                    if cpu.read(c.finished) == 1 {
                        cpu.write(c.mutex, 0);
                        self.phase = Phase::Done;
                        continue;
                    }
                    if cpu.read(c.proc) == 0 {
                        return Step::WaitFor(vec![c.proc, c.finished]);
                    }
                    if cpu.read(c.marker()) != MARKER_VALUE {
                        self.phase = Phase::Recover;
                        continue;
                    }
                    cpu.write(c.busy, 1);
                    self.phase = Phase::AfterTx;
                    return self.tick();
                }
                Phase::AfterTx => match cpu.last_tx() {
                    Some(TxOutcome::Committed) => {
                        self.ticks_committed += 1;
                        if self.config.epsilon == 0 {
                            let v = cpu.read(c.internal);
                            cpu.write(c.t, v);
                            cpu.write(c.busy, 0);
                            self.phase = Phase::Loop;
                        } else {
                            self.phase = Phase::Mirror;
                            return Step::Compute(1);
                        }
                    }
                    _ => {
                        cpu.write(c.busy, 0);
                        self.phase = Phase::Loop;
                    }
                },
                Phase::Mirror => {
                    let v = cpu.read(c.internal);
                    cpu.write(c.t, v);
                    cpu.write(c.busy, 0);
                    self.phase = Phase::Loop;
                    if self.config.epsilon > 1 {
                        return Step::Compute(self.config.epsilon - 1);
                    }
                }
                Phase::Recover => {
                    if cpu.read(c.finished) == 1
                        || cpu.read(c.proc) == 0
                        || cpu.read(c.marker()) == MARKER_VALUE
                    {
                        self.phase = Phase::Loop;
                        continue;
                    }
                    let rip = cpu.read(c.ssa_rip());
                    if !self.handler.contains(rip) {
                        cpu.write(c.original_rip, rip);
                        cpu.write(c.ssa_rip(), self.handler.entry);
                        cpu.note("handler_installed", rip);
                    } else if rip != self.handler.entry {
                        cpu.write(c.ssa_rip(), self.handler.entry);
                    }
                    return Step::WaitFor(vec![c.marker(), c.ssa_rip(), c.proc, c.finished]);
                }
                Phase::Done => {
                    cpu.eexit();
                    return Step::Halt;
                }
            }
        }
    }
}

/// Memory time-integral state, updated on every allocator call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemState {
    pub m_int: u64,
    pub m_max: u64,
    pub m_cur: u64,
    pub t_mem: u64,
    pub events: u64,
    finalized: bool,
}

impl MemState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One allocator event stamped with the last completed tick.
    pub fn mem_update(&mut self, delta: i64, t_now: u64) -> Result<(), MeterError> {
        if self.finalized {
            return Err(MeterError::Finalized);
        }
        if t_now < self.t_mem {
            return Err(MeterError::ClockRegression {
                last: self.t_mem,
                now: t_now,
            });
        }
        let next = if delta >= 0 {
            self.m_cur.checked_add(delta as u64).ok_or(MeterError::Overflow)?
        } else {
            let freed = delta.unsigned_abs();
            self.m_cur.checked_sub(freed).ok_or(MeterError::NegativeMemory {
                live: self.m_cur,
                freed,
            })?
        };
        self.integrate(t_now)?;
        self.m_cur = next;
        self.m_max = self.m_max.max(self.m_cur);
        self.events += 1;
        Ok(())
    }

    fn integrate(&mut self, t_now: u64) -> Result<(), MeterError> {
        let dt = t_now - self.t_mem;
        let add = dt.checked_mul(self.m_cur).ok_or(MeterError::Overflow)?;
        self.m_int = self.m_int.checked_add(add).ok_or(MeterError::Overflow)?;
        self.t_mem = t_now;
        Ok(())
    }

    pub fn mem_finalize(&mut self, t_final: u64) -> Result<(u64, u64), MeterError> {
        if self.finalized {
            return Err(MeterError::Finalized);
        }
        if t_final < self.t_mem {
            return Err(MeterError::ClockRegression {
                last: self.t_mem,
                now: t_final,
            });
        }
        self.integrate(t_final)?;
        self.finalized = true;
        Ok((self.m_int, self.m_max))
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetState {
    pub net: u64,
}

impl NetState {
    pub fn net_add(&mut self, sent: u64, received: u64) {
        self.net = self.net.saturating_add(sent).saturating_add(received);
    }
}

/// Tag for an invocation: hash of the client's authorization token, or of
/// the empty string when none was supplied.
pub fn tag_for_token(token: Option<&[u8]>) -> Digest {
    hash(token.unwrap_or_default())
}

/// The unsigned report fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurement {
    pub t_max: u64,
    pub tau: u64,
    pub m_int: u64,
    pub m_max: u64,
    /// `m_int / t_max`, truncated; zero when `t_max` is zero.
    pub m_avg: u64,
    pub net: u64,
    pub tag: Digest,
    pub keyset_id: Digest,
}

impl Measurement {
    pub fn new(
        t_max: u64,
        tau: u64,
        m_int: u64,
        m_max: u64,
        net: u64,
        tag: Digest,
        keyset_id: Digest,
    ) -> Self {
        Self {
            t_max,
            tau,
            m_int,
            m_max,
            m_avg: m_int.checked_div(t_max).unwrap_or(0),
            net,
            tag,
            keyset_id,
        }
    }
}

impl Canonical for Measurement {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.t_max)
            .u64(self.tau)
            .u64(self.m_int)
            .u64(self.m_max)
            .u64(self.m_avg)
            .u64(self.net)
            .value(&self.tag)
            .value(&self.keyset_id);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            t_max: dec.u64()?,
            tau: dec.u64()?,
            m_int: dec.u64()?,
            m_max: dec.u64()?,
            m_avg: dec.u64()?,
            net: dec.u64()?,
            tag: dec.value()?,
            keyset_id: dec.value()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignedMeasurement {
    pub measurement: Measurement,
    /// Signature over the hash of the encoded measurement.
    pub signature: Signature,
}

impl SignedMeasurement {
    pub fn digest(&self) -> Digest {
        hash_canonical(self)
    }

    pub fn verify(&self, k_res: &VerifyingKey) -> bool {
        verify(
            k_res,
            hash_canonical(&self.measurement).as_bytes(),
            &self.signature,
        )
    }
}

impl std::ops::Deref for SignedMeasurement {
    type Target = Measurement;
    fn deref(&self) -> &Measurement {
        &self.measurement
    }
}

impl Canonical for SignedMeasurement {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.measurement).value(&self.signature);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            measurement: dec.value()?,
            signature: dec.value()?,
        })
    }
}

pub fn build_signed_measurement(measurement: Measurement, k_res: &SigningKeyPair) -> SignedMeasurement {
    SignedMeasurement {
        signature: sign(k_res, hash_canonical(&measurement).as_bytes()),
        measurement,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn update_applies_the_integral_step() {
        let mut m = MemState {
            m_cur: 200,
            t_mem: 3,
            m_max: 200,
            ..MemState::default()
        };
        m.mem_update(100, 5).unwrap();
        assert_eq!((m.m_int, m.m_cur, m.t_mem, m.m_max), (400, 300, 5, 300));
        m.mem_update(0, 7).unwrap();
        assert_eq!((m.m_int, m.m_max), (1000, 300));
    }

    #[test]
    fn churn_between_ticks_only_raises_the_peak() {
        let mut m = MemState::new();
        m.mem_update(4096, 2).unwrap();
        m.mem_update(-4096, 2).unwrap();
        assert_eq!(m.mem_finalize(10).unwrap(), (0, 4096));
    }

    #[test]
    fn finalize_integrates_the_tail() {
        let mut m = MemState::new();
        m.mem_update(1000, 6).unwrap();
        assert_eq!(m.mem_finalize(10).unwrap(), (4000, 1000));
        let mut freed = MemState::new();
        freed.mem_update(10, 1).unwrap();
        freed.mem_update(-10, 3).unwrap();
        assert_eq!(freed.mem_finalize(9).unwrap(), (20, 10));
    }

    #[test]
    fn accounting_faults() {
        let mut m = MemState::new();
        assert_eq!(
            m.mem_update(-1, 0),
            Err(MeterError::NegativeMemory { live: 0, freed: 1 })
        );
        m.mem_update(5, 4).unwrap();
        assert_eq!(
            m.mem_update(5, 3),
            Err(MeterError::ClockRegression { last: 4, now: 3 })
        );
        assert!(m.mem_finalize(2).is_err());
        m.mem_finalize(4).unwrap();
        assert_eq!(m.mem_finalize(4), Err(MeterError::Finalized));
        assert_eq!(TimerConfig::new(0, 0), Err(MeterError::ZeroTau));
    }

    #[test]
    fn network_sums_both_directions() {
        let mut n = NetState::default();
        assert_eq!(n.net, 0);
        n.net_add(1000, 500);
        assert_eq!(n.net, 1500);
    }

    fn sample(t_max: u64, m_int: u64) -> Measurement {
        Measurement::new(t_max, 10, m_int, 64, 7, tag_for_token(None), hash(b"ks"))
    }

    #[test]
    fn empty_token_tag_is_hash_of_empty() {
        assert_eq!(tag_for_token(None), hash(b""));
        assert_eq!(tag_for_token(Some(b"api-key")), hash(b"api-key"));
    }

    #[test]
    fn report_verifies_and_every_field_is_bound() {
        let k = SigningKeyPair::from_seed(3);
        let signed = build_signed_measurement(sample(12, 100), &k);
        assert!(signed.verify(&k.public()));
        assert!(!signed.verify(&SigningKeyPair::from_seed(4).public()));
        let bytes = signed.to_canonical_bytes();
        let body_len = signed.measurement.to_canonical_bytes().len();
        for i in 0..body_len {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            let forged = SignedMeasurement::from_canonical_bytes(&b).unwrap();
            assert!(!forged.verify(&k.public()), "byte {i} not bound");
        }
        assert_eq!(sample(0, 5).m_avg, 0);
    }

    proptest! {
        #[test]
        fn average_is_truncated_division(t_max in 0u64..1_000_000, m_int in 0u64..1u64 << 40) {
            let m = sample(t_max, m_int);
            if t_max > 0 {
                prop_assert!(m.m_avg * t_max <= m_int);
                prop_assert!(m_int < (m.m_avg + 1) * t_max);
            }
        }

        #[test]
        fn mem_state_invariants(events in proptest::collection::vec((0u64..3, -50i64..80), 0..40)) {
            let mut m = MemState::new();
            let mut t = 0;
            let mut last_int = 0;
            for (dt, delta) in events {
                t += dt;
                let delta = if delta < 0 { -(delta.unsigned_abs().min(m.m_cur) as i64) } else { delta };
                m.mem_update(delta, t).unwrap();
                prop_assert!(m.m_max >= m.m_cur);
                prop_assert!(m.m_int >= last_int);
                last_int = m.m_int;
            }
        }
    }
}
