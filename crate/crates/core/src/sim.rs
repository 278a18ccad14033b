//! Deterministic discrete-event enclave kernel.
//!
//! Actors are cooperative step functions driven by an integer cycle clock.
//! Enclave actors own a save-state area (SSA); an asynchronous exit spills
//! garbage over the SSA marker and records the resume address, and ERESUME
//! transfers control to whatever address the SSA holds, which may be a
//! registered handler. Transactions buffer their writes and abort when a
//! watched location is written by anyone else or when their actor is
//! interrupted.
//!
//! Within one cycle the kernel first starts actors, then applies scheduled
//! interrupts and resumes, then steps ready actors in registration order,
//! repeating passes until nobody can make progress.

use std::collections::VecDeque;
use std::fmt;
use std::ops::{Add, Sub};

use thiserror::Error;

/// Value the metering code keeps in a worker's SSA while it is not interrupted.
pub const MARKER_VALUE: u64 = 12345;

/// Addresses at or above this value name handler instructions, never program steps.
pub const HANDLER_SPACE: u64 = 1 << 62;
const HANDLER_STRIDE: u64 = 1 << 16;
const STEPS_PER_CYCLE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Cycle(pub u64);

impl Cycle {
    pub const ZERO: Cycle = Cycle(0);

    pub fn get(self) -> u64 {
        self.0
    }
}

impl Add<u64> for Cycle {
    type Output = Cycle;
    fn add(self, rhs: u64) -> Cycle {
        Cycle(self.0 + rhs)
    }
}

impl Sub for Cycle {
    type Output = u64;
    fn sub(self, rhs: Cycle) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Cycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(usize);

/// A memory location addressable by enclave code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loc {
    Cell(CellId),
    SsaMarker(ActorId),
    SsaRip(ActorId),
}

/// An untrusted memory cell. This is the only kind of location host actors
/// can name, so they have no way to reach an SSA or enclave memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HostCell(CellId);

impl HostCell {
    pub fn loc(self) -> Loc {
        Loc::Cell(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Enclave,
    Host,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxOp {
    /// Abort explicitly unless the location holds the value.
    Expect(Loc, u64),
    Compute(u64),
    Write(Loc, u64),
    Increment(Loc),
    /// Starting a transaction inside a transaction; always a kernel fault.
    Nested(Box<TxRequest>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxRequest {
    pub watch: Vec<Loc>,
    pub body: Vec<TxOp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// Interruptible work; progress made before an interrupt is kept.
    Compute(u64),
    /// Block until any of the locations is written.
    WaitFor(Vec<Loc>),
    Tx(TxRequest),
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortCause {
    Conflict,
    Interrupt,
    Explicit,
}

impl fmt::Display for AbortCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbortCause::Conflict => "conflict",
            AbortCause::Interrupt => "interrupt",
            AbortCause::Explicit => "explicit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxOutcome {
    Committed,
    Aborted(AbortCause),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerOp {
    Compute(u64),
    /// One cycle.
    Write(Loc, u64),
    /// One cycle. The target must be the interrupted program position.
    JumpIndirect(Loc),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandlerInfo {
    pub entry: u64,
    pub len: u64,
}

impl HandlerInfo {
    pub fn contains(&self, rip: u64) -> bool {
        rip >= self.entry && rip < self.entry + self.len
    }
}

pub trait EnclaveProgram {
    fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step;
}

pub trait HostProgram {
    fn step(&mut self, cpu: &mut HostCpu<'_>) -> Step;
}

pub enum Program<'p> {
    Enclave(&'p mut dyn EnclaveProgram),
    Host(&'p mut dyn HostProgram),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScheduledInterrupt {
    pub target: ActorId,
    pub interrupt: Cycle,
    pub resume: Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("interrupt at {interrupt} resumes earlier, at {resume}")]
    ResumeBeforeInterrupt { interrupt: Cycle, resume: Cycle },
    #[error("unknown actor {0:?}")]
    UnknownActor(ActorId),
    #[error("trace is incomplete")]
    Incomplete,
}

/// Interrupt events ordered by interrupt cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterruptSchedule {
    events: Vec<ScheduledInterrupt>,
}

impl InterruptSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(mut events: Vec<ScheduledInterrupt>) -> Result<Self, SimError> {
        for e in &events {
            if e.resume < e.interrupt {
                return Err(SimError::ResumeBeforeInterrupt {
                    interrupt: e.interrupt,
                    resume: e.resume,
                });
            }
        }
        events.sort_by_key(|e| e.interrupt);
        Ok(Self { events })
    }

    pub fn events(&self) -> &[ScheduledInterrupt] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Adds events, keeping the order invariant.
    pub fn merged(&self, extra: &[ScheduledInterrupt]) -> Result<Self, SimError> {
        let mut all = self.events.clone();
        all.extend_from_slice(extra);
        Self::new(all)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceLevel {
    /// Every compute step, wait and memory write.
    #[default]
    Full,
    /// Lifecycle, interrupt, transaction and note events only.
    Summary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Start,
    Halt,
    Compute(u64),
    Wait,
    Aex,
    Eresume { handler: bool },
    Preempt,
    Resume,
    EEnter,
    EExit,
    TxBegin,
    TxCommit,
    TxAbort(AbortCause),
    Write { loc: Loc, value: u64 },
    HandlerEnd,
    Note(&'static str, u64),
    Fault(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: Cycle,
    pub actor: ActorId,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    LimitReached,
    Deadlock,
    Fault(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTrace {
    pub actor_names: Vec<String>,
    pub cell_names: Vec<String>,
    pub events: Vec<TraceEvent>,
    pub end: Cycle,
    pub outcome: Outcome,
    resident: Vec<u64>,
}

impl SimTrace {
    pub fn is_complete(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn actor(&self, name: &str) -> Option<ActorId> {
        self.actor_names.iter().position(|n| n == name).map(ActorId)
    }

    pub fn events_of(&self, actor: ActorId) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.actor == actor)
    }

    /// First value recorded under a note label by an actor.
    pub fn note(&self, actor: ActorId, label: &str) -> Option<u64> {
        self.events_of(actor).find_map(|e| match e.kind {
            EventKind::Note(l, v) if l == label => Some(v),
            _ => None,
        })
    }

    pub fn fault(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Fault(msg) => Some(msg),
            _ => None,
        }
    }

    fn loc_name(&self, loc: Loc) -> String {
        match loc {
            Loc::Cell(CellId(i)) => self.cell_names[i].clone(),
            Loc::SsaMarker(a) => format!("ssa.marker[{}]", self.actor_names[a.0]),
            Loc::SsaRip(a) => format!("ssa.rip[{}]", self.actor_names[a.0]),
        }
    }

    /// Line-delimited `cycle,actor,event,detail` text.
    pub fn export_text(&self) -> String {
        let mut out = String::from("cycle,actor,event,detail\n");
        for e in &self.events {
            let (name, detail) = match &e.kind {
                EventKind::Start => ("start", String::new()),
                EventKind::Halt => ("halt", String::new()),
                EventKind::Compute(n) => ("compute", n.to_string()),
                EventKind::Wait => ("wait", String::new()),
                EventKind::Aex => ("aex", String::new()),
                EventKind::Eresume { handler } => (
                    "eresume",
                    if *handler { "handler" } else { "direct" }.to_string(),
                ),
                EventKind::Preempt => ("preempt", String::new()),
                EventKind::Resume => ("resume", String::new()),
                EventKind::EEnter => ("eenter", String::new()),
                EventKind::EExit => ("eexit", String::new()),
                EventKind::TxBegin => ("tx_begin", String::new()),
                EventKind::TxCommit => ("tx_commit", String::new()),
                EventKind::TxAbort(c) => ("tx_abort", c.to_string()),
                EventKind::Write { loc, value } => {
                    ("write", format!("{}={value}", self.loc_name(*loc)))
                }
                EventKind::HandlerEnd => ("handler_end", String::new()),
                EventKind::Note(l, v) => ("note", format!("{l}={v}")),
                EventKind::Fault(m) => ("fault", m.replace(',', ";")),
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.cycle, self.actor_names[e.actor.0], name, detail
            ));
        }
        out.push_str(&format!(
            "{},-,end,{}\n",
            self.end,
            match &self.outcome {
                Outcome::Completed => "completed".to_string(),
                Outcome::LimitReached => "limit".to_string(),
                Outcome::Deadlock => "deadlock".to_string(),
                Outcome::Fault(m) => format!("fault: {}", m.replace(',', ";")),
            }
        ));
        out
    }

    /// Reconstructs resident intervals from lifecycle events alone.
    pub fn resident_intervals(&self, actor: ActorId) -> Vec<(Cycle, Cycle)> {
        let mut out = Vec::new();
        let (mut started, mut halted, mut inside, mut interrupted) = (false, false, false, false);
        let mut since: Option<Cycle> = None;
        for e in self.events_of(actor) {
            match e.kind {
                EventKind::Start => started = true,
                EventKind::Halt => halted = true,
                EventKind::EEnter => inside = true,
                EventKind::EExit => inside = false,
                EventKind::Aex => interrupted = true,
                EventKind::Eresume { .. } => interrupted = false,
                _ => continue,
            }
            let now = started && !halted && inside && !interrupted;
            match (since, now) {
                (None, true) => since = Some(e.cycle),
                (Some(s), false) => {
                    if e.cycle > s {
                        out.push((s, e.cycle));
                    }
                    since = None;
                }
                _ => {}
            }
        }
        if let Some(s) = since {
            if self.end > s {
                out.push((s, self.end));
            }
        }
        out
    }
}

/// Cycles the actor spent inside the enclave and not interrupted.
pub fn true_resident_cycles(trace: &SimTrace, actor: ActorId) -> Result<Cycle, SimError> {
    trace
        .resident
        .get(actor.0)
        .map(|&c| Cycle(c))
        .ok_or(SimError::UnknownActor(actor))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Ssa {
    marker: u64,
    rip: u64,
    saved_regs: u64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub trace: SimTrace,
    cells: Vec<u64>,
    ssa: Vec<Ssa>,
}

impl SimResult {
    pub fn read(&self, loc: Loc) -> u64 {
        match loc {
            Loc::Cell(CellId(i)) => self.cells[i],
            Loc::SsaMarker(a) => self.ssa[a.0].marker,
            Loc::SsaRip(a) => self.ssa[a.0].rip,
        }
    }

    pub fn read_host(&self, cell: HostCell) -> u64 {
        self.read(cell.loc())
    }
}

struct CellDecl {
    name: String,
    region: Region,
    init: u64,
}

struct ActorDecl {
    name: String,
    enclave: bool,
    start_at: Cycle,
}

/// Layout of one simulation: cells, actors and handlers. Programs are bound
/// at [`Kernel::run`].
#[derive(Default)]
pub struct Kernel {
    cells: Vec<CellDecl>,
    actors: Vec<ActorDecl>,
    handlers: Vec<Vec<HandlerOp>>,
    level: TraceLevel,
}

impl Kernel {
    pub fn new(level: TraceLevel) -> Self {
        Self {
            level,
            ..Self::default()
        }
    }

    pub fn enclave_cell(&mut self, name: &str, init: u64) -> Loc {
        self.cells.push(CellDecl {
            name: name.to_string(),
            region: Region::Enclave,
            init,
        });
        Loc::Cell(CellId(self.cells.len() - 1))
    }

    pub fn host_cell(&mut self, name: &str, init: u64) -> HostCell {
        self.cells.push(CellDecl {
            name: name.to_string(),
            region: Region::Host,
            init,
        });
        HostCell(CellId(self.cells.len() - 1))
    }

    /// Actors step in registration order within a cycle.
    pub fn enclave_actor(&mut self, name: &str) -> ActorId {
        self.add_actor(name, true)
    }

    pub fn host_actor(&mut self, name: &str) -> ActorId {
        self.add_actor(name, false)
    }

    fn add_actor(&mut self, name: &str, enclave: bool) -> ActorId {
        self.actors.push(ActorDecl {
            name: name.to_string(),
            enclave,
            start_at: Cycle::ZERO,
        });
        ActorId(self.actors.len() - 1)
    }

    pub fn delay_start(&mut self, actor: ActorId, at: Cycle) {
        self.actors[actor.0].start_at = at;
    }

    pub fn register_handler(&mut self, ops: Vec<HandlerOp>) -> HandlerInfo {
        assert!(!ops.is_empty() && (ops.len() as u64) < HANDLER_STRIDE);
        let entry = HANDLER_SPACE + self.handlers.len() as u64 * HANDLER_STRIDE;
        let len = ops.len() as u64;
        self.handlers.push(ops);
        HandlerInfo { entry, len }
    }

    pub fn actor_count(&self) -> usize {
        self.actors.len()
    }

    /// Runs to completion, deadlock, fault or `limit`. Every declared actor
    /// must be bound to a program of its kind.
    pub fn run(
        self,
        mut programs: Vec<(ActorId, Program<'_>)>,
        schedule: &InterruptSchedule,
        limit: Cycle,
    ) -> SimResult {
        programs.sort_by_key(|(id, _)| *id);
        assert_eq!(
            programs.len(),
            self.actors.len(),
            "every actor needs exactly one program"
        );
        let mut bound: Vec<Program<'_>> = Vec::with_capacity(programs.len());
        for (i, (id, p)) in programs.into_iter().enumerate() {
            assert_eq!(id.0, i, "every actor needs exactly one program");
            match (&p, self.actors[i].enclave) {
                (Program::Enclave(_), true) | (Program::Host(_), false) => {}
                _ => panic!("program kind does not match actor {}", self.actors[i].name),
            }
            bound.push(p);
        }

        let mut boundaries: Vec<(Cycle, usize, u8, ActorId)> = Vec::new();
        for (i, e) in schedule.events().iter().enumerate() {
            boundaries.push((e.interrupt, i, 0, e.target));
            boundaries.push((e.resume, i, 1, e.target));
        }
        boundaries.sort();

        let mut st = State {
            cells: self.cells.iter().map(|c| c.init).collect(),
            regions: self.cells.iter().map(|c| c.region).collect(),
            rts: self
                .actors
                .iter()
                .map(|a| Rt {
                    enclave: a.enclave,
                    start_at: a.start_at,
                    ..Rt::default()
                })
                .collect(),
            handlers: self.handlers,
            events: Vec::new(),
            resident: vec![0; self.actors.len()],
            now: Cycle::ZERO,
            level: self.level,
            fault: None,
        };

        let mut next_boundary = 0;
        let outcome = loop {
            let now = st.now;
            for i in 0..st.rts.len() {
                let rt = &mut st.rts[i];
                if !rt.started && rt.start_at <= now {
                    rt.started = true;
                    st.record(ActorId(i), EventKind::Start);
                }
            }
            while next_boundary < boundaries.len() && boundaries[next_boundary].0 <= now {
                let (_, _, phase, target) = boundaries[next_boundary];
                next_boundary += 1;
                if target.0 >= st.rts.len() {
                    continue;
                }
                if phase == 0 {
                    st.aex(target);
                } else {
                    st.eresume(target);
                }
                if st.fault.is_some() {
                    break;
                }
            }

            let mut steps = 0u64;
            'passes: loop {
                let mut progressed = false;
                for i in 0..st.rts.len() {
                    if st.fault.is_some() {
                        break 'passes;
                    }
                    let a = ActorId(i);
                    if st.can_act(a) {
                        st.act(a, &mut bound[i]);
                        progressed = true;
                        steps += 1;
                        if steps > STEPS_PER_CYCLE_LIMIT {
                            st.fault = Some(format!("livelock at cycle {now}"));
                        }
                    }
                }
                if !progressed {
                    break;
                }
            }
            if let Some(msg) = st.fault.clone() {
                st.record(ActorId(0), EventKind::Fault(msg.clone()));
                break Outcome::Fault(msg);
            }

            let mut next: Option<Cycle> = boundaries.get(next_boundary).map(|b| b.0);
            for rt in &st.rts {
                let candidate = if !rt.started {
                    Some(rt.start_at)
                } else {
                    rt.next_completion()
                };
                if let Some(c) = candidate {
                    next = Some(next.map_or(c, |n| n.min(c)));
                }
            }
            let Some(next) = next else {
                if st.rts.iter().all(|r| r.halted) {
                    break Outcome::Completed;
                }
                break Outcome::Deadlock;
            };
            debug_assert!(next > now);
            if next > limit {
                st.advance(limit.max(now));
                break Outcome::LimitReached;
            }
            st.advance(next);
        };

        SimResult {
            ssa: st.rts.iter().map(|r| r.ssa).collect(),
            cells: st.cells,
            trace: SimTrace {
                actor_names: self.actors.iter().map(|a| a.name.clone()).collect(),
                cell_names: self.cells.iter().map(|c| c.name.clone()).collect(),
                events: st.events,
                end: st.now,
                outcome,
                resident: st.resident,
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Work {
    remaining: u64,
    since: Option<Cycle>,
}

impl Work {
    fn running(n: u64, now: Cycle) -> Self {
        Self {
            remaining: n,
            since: Some(now),
        }
    }

    fn end(&self) -> Option<Cycle> {
        self.since.map(|s| s + self.remaining)
    }

    fn pause(&mut self, now: Cycle) {
        if let Some(s) = self.since.take() {
            self.remaining -= now - s;
        }
    }

    fn resume(&mut self, now: Cycle) {
        if self.since.is_none() {
            self.since = Some(now);
        }
    }
}

#[derive(Debug)]
struct ActiveTx {
    watch: Vec<Loc>,
    ops: VecDeque<TxOp>,
    writes: Vec<(Loc, u64)>,
}

#[derive(Debug, Clone, Copy)]
struct HandlerFrame {
    handler: usize,
    op: usize,
    pending: Option<Work>,
}

#[derive(Debug, Default)]
struct Rt {
    enclave: bool,
    start_at: Cycle,
    started: bool,
    halted: bool,
    depth: u32,
    aex_inside: bool,
    inside: bool,
    work: Option<Work>,
    waiting: Option<Vec<Loc>>,
    tx: Option<ActiveTx>,
    frame: Option<HandlerFrame>,
    pc: u64,
    last_tx: Option<TxOutcome>,
    ssa: Ssa,
}

impl Rt {
    fn live(&self) -> bool {
        self.started && !self.halted && self.depth == 0
    }

    fn next_completion(&self) -> Option<Cycle> {
        if !self.live() {
            return None;
        }
        if let Some(frame) = &self.frame {
            return frame.pending.and_then(|w| w.end());
        }
        if self.waiting.is_some() {
            return None;
        }
        self.work.and_then(|w| w.end())
    }
}

struct State {
    cells: Vec<u64>,
    regions: Vec<Region>,
    rts: Vec<Rt>,
    handlers: Vec<Vec<HandlerOp>>,
    events: Vec<TraceEvent>,
    resident: Vec<u64>,
    now: Cycle,
    level: TraceLevel,
    fault: Option<String>,
}

fn spill_value(cycle: Cycle, actor: ActorId) -> u64 {
    let mut z = cycle.0 ^ ((actor.0 as u64) << 48) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    if z == MARKER_VALUE {
        z + 1
    } else {
        z
    }
}

impl State {
    fn record(&mut self, actor: ActorId, kind: EventKind) {
        if self.level == TraceLevel::Summary
            && matches!(
                kind,
                EventKind::Compute(_) | EventKind::Wait | EventKind::Write { .. }
            )
        {
            return;
        }
        self.events.push(TraceEvent {
            cycle: self.now,
            actor,
            kind,
        });
    }

    fn advance(&mut self, to: Cycle) {
        let dt = to - self.now;
        for (i, rt) in self.rts.iter().enumerate() {
            if rt.live() && rt.inside {
                self.resident[i] += dt;
            }
        }
        self.now = to;
    }

    fn raw_read(&self, loc: Loc) -> u64 {
        match loc {
            Loc::Cell(CellId(i)) => self.cells[i],
            Loc::SsaMarker(a) => self.rts[a.0].ssa.marker,
            Loc::SsaRip(a) => self.rts[a.0].ssa.rip,
        }
    }

    fn check_enclave_access(&mut self, actor: ActorId, loc: Loc, what: &str) -> bool {
        let needs_enclave = match loc {
            Loc::Cell(CellId(i)) => self.regions[i] == Region::Enclave,
            Loc::SsaMarker(a) | Loc::SsaRip(a) => {
                if !self.rts[a.0].enclave {
                    self.fault = Some(format!("{what} of a host actor's SSA"));
                    return false;
                }
                true
            }
        };
        if needs_enclave && !(self.rts[actor.0].enclave && self.rts[actor.0].inside) {
            self.fault = Some(format!("{what} of enclave memory from outside the enclave"));
            return false;
        }
        true
    }

    /// Applies a visible write: conflicts abort other actors' transactions
    /// watching the location and wake its waiters.
    fn write(&mut self, writer: ActorId, loc: Loc, value: u64) {
        match loc {
            Loc::Cell(CellId(i)) => self.cells[i] = value,
            Loc::SsaMarker(a) => self.rts[a.0].ssa.marker = value,
            Loc::SsaRip(a) => self.rts[a.0].ssa.rip = value,
        }
        self.record(writer, EventKind::Write { loc, value });
        for i in 0..self.rts.len() {
            if i == writer.0 {
                continue;
            }
            let conflict = self.rts[i]
                .tx
                .as_ref()
                .is_some_and(|tx| tx.watch.contains(&loc));
            if conflict {
                self.abort(ActorId(i), AbortCause::Conflict);
            }
            let rt = &mut self.rts[i];
            if rt.waiting.as_ref().is_some_and(|w| w.contains(&loc)) {
                rt.waiting = None;
            }
        }
    }

    fn abort(&mut self, actor: ActorId, cause: AbortCause) {
        let rt = &mut self.rts[actor.0];
        if rt.tx.take().is_some() {
            rt.work = None;
            rt.last_tx = Some(TxOutcome::Aborted(cause));
            self.record(actor, EventKind::TxAbort(cause));
        }
    }

    fn aex(&mut self, actor: ActorId) {
        let now = self.now;
        let rt = &mut self.rts[actor.0];
        rt.depth += 1;
        if rt.depth > 1 || !rt.started || rt.halted {
            return;
        }
        if !(rt.enclave && rt.inside) {
            rt.aex_inside = false;
            if let Some(w) = rt.work.as_mut() {
                w.pause(now);
            }
            self.record(actor, EventKind::Preempt);
            return;
        }
        rt.aex_inside = true;
        self.abort(actor, AbortCause::Interrupt);
        let rt = &mut self.rts[actor.0];
        let rip = match rt.frame.take() {
            Some(frame) => HANDLER_SPACE + frame.handler as u64 * HANDLER_STRIDE + frame.op as u64,
            None => {
                if let Some(w) = rt.work.as_mut() {
                    w.pause(now);
                }
                rt.pc
            }
        };
        rt.ssa.saved_regs = rt.pc;
        self.record(actor, EventKind::Aex);
        self.write(actor, Loc::SsaRip(actor), rip);
        self.write(actor, Loc::SsaMarker(actor), spill_value(now, actor));
    }

    fn eresume(&mut self, actor: ActorId) {
        let now = self.now;
        let rt = &mut self.rts[actor.0];
        if rt.depth == 0 {
            return;
        }
        rt.depth -= 1;
        if rt.depth > 0 || !rt.started || rt.halted {
            return;
        }
        if !rt.aex_inside {
            if let Some(w) = rt.work.as_mut() {
                w.resume(now);
            }
            self.record(actor, EventKind::Resume);
            return;
        }
        let rip = rt.ssa.rip;
        if rip >= HANDLER_SPACE {
            let handler = ((rip - HANDLER_SPACE) / HANDLER_STRIDE) as usize;
            let op = ((rip - HANDLER_SPACE) % HANDLER_STRIDE) as usize;
            if handler >= self.handlers.len() || op >= self.handlers[handler].len() {
                self.fault = Some(format!("ERESUME to unmapped handler address {rip:#x}"));
                return;
            }
            rt.frame = Some(HandlerFrame {
                handler,
                op,
                pending: None,
            });
            self.record(actor, EventKind::Eresume { handler: true });
        } else if rip == rt.pc {
            if let Some(w) = rt.work.as_mut() {
                w.resume(now);
            }
            self.record(actor, EventKind::Eresume { handler: false });
        } else {
            self.fault = Some(format!(
                "ERESUME to address {rip} but the thread stopped at {}",
                rt.pc
            ));
        }
    }

    fn can_act(&self, actor: ActorId) -> bool {
        let rt = &self.rts[actor.0];
        if !rt.live() {
            return false;
        }
        if let Some(frame) = &rt.frame {
            return frame
                .pending
                .map_or(true, |w| w.end().is_some_and(|e| e <= self.now));
        }
        if rt.waiting.is_some() {
            return false;
        }
        rt.work
            .map_or(true, |w| w.end().is_some_and(|e| e <= self.now))
    }

    fn act(&mut self, actor: ActorId, program: &mut Program<'_>) {
        if self.rts[actor.0].frame.is_some() {
            self.run_handler(actor);
            return;
        }
        let rt = &mut self.rts[actor.0];
        rt.work = None;
        if rt.tx.is_some() {
            self.continue_tx(actor);
            let rt = &self.rts[actor.0];
            if rt.tx.is_some() || rt.work.is_some() || self.fault.is_some() {
                return;
            }
        }
        let step = match program {
            Program::Enclave(p) => p.step(&mut EnclaveCpu { st: self, actor }),
            Program::Host(p) => p.step(&mut HostCpu { st: self, actor }),
        };
        self.rts[actor.0].pc += 1;
        if self.fault.is_some() {
            return;
        }
        self.apply(actor, step);
    }

    fn apply(&mut self, actor: ActorId, step: Step) {
        let now = self.now;
        match step {
            Step::Compute(n) => {
                self.record(actor, EventKind::Compute(n));
                if n > 0 {
                    self.rts[actor.0].work = Some(Work::running(n, now));
                }
            }
            Step::WaitFor(locs) => {
                self.record(actor, EventKind::Wait);
                self.rts[actor.0].waiting = Some(locs);
            }
            Step::Tx(req) => {
                let rt = &mut self.rts[actor.0];
                if !(rt.enclave && rt.inside) {
                    self.fault = Some("transaction outside an enclave".into());
                    return;
                }
                rt.tx = Some(ActiveTx {
                    watch: req.watch,
                    ops: req.body.into(),
                    writes: Vec::new(),
                });
                self.record(actor, EventKind::TxBegin);
                self.continue_tx(actor);
            }
            Step::Halt => {
                self.rts[actor.0].halted = true;
                self.record(actor, EventKind::Halt);
            }
        }
    }

    fn tx_read(&self, actor: ActorId, loc: Loc) -> u64 {
        let tx = self.rts[actor.0].tx.as_ref().expect("active transaction");
        tx.writes
            .iter()
            .rev()
            .find(|(l, _)| *l == loc)
            .map_or_else(|| self.raw_read(loc), |(_, v)| *v)
    }

    fn continue_tx(&mut self, actor: ActorId) {
        let now = self.now;
        loop {
            let op = self.rts[actor.0]
                .tx
                .as_mut()
                .expect("active transaction")
                .ops
                .pop_front();
            match op {
                None => break,
                Some(TxOp::Expect(loc, v)) => {
                    if !self.check_enclave_access(actor, loc, "read") {
                        return;
                    }
                    if self.tx_read(actor, loc) != v {
                        self.abort(actor, AbortCause::Explicit);
                        return;
                    }
                }
                Some(TxOp::Compute(0)) => {}
                Some(TxOp::Compute(n)) => {
                    self.rts[actor.0].work = Some(Work::running(n, now));
                    return;
                }
                Some(TxOp::Write(loc, v)) => {
                    if !self.check_enclave_access(actor, loc, "write") {
                        return;
                    }
                    self.rts[actor.0].tx.as_mut().unwrap().writes.push((loc, v));
                }
                Some(TxOp::Increment(loc)) => {
                    if !self.check_enclave_access(actor, loc, "write") {
                        return;
                    }
                    let v = self.tx_read(actor, loc).wrapping_add(1);
                    self.rts[actor.0].tx.as_mut().unwrap().writes.push((loc, v));
                }
                Some(TxOp::Nested(_)) => {
                    self.fault = Some("nested transaction".into());
                    return;
                }
            }
        }
        let tx = self.rts[actor.0].tx.take().expect("active transaction");
        self.rts[actor.0].last_tx = Some(TxOutcome::Committed);
        self.record(actor, EventKind::TxCommit);
        for (loc, v) in tx.writes {
            self.write(actor, loc, v);
        }
    }

    fn run_handler(&mut self, actor: ActorId) {
        let now = self.now;
        let mut frame = self.rts[actor.0].frame.expect("handler frame");
        if frame.pending.take().is_some() {
            frame.op += 1;
        }
        let ops_len = self.handlers[frame.handler].len();
        while frame.op < ops_len {
            let op = self.handlers[frame.handler][frame.op];
            match op {
                HandlerOp::Compute(0) => {
                    frame.op += 1;
                    continue;
                }
                HandlerOp::Compute(n) => frame.pending = Some(Work::running(n, now)),
                HandlerOp::Write(loc, v) => {
                    self.write(actor, loc, v);
                    frame.pending = Some(Work::running(1, now));
                }
                HandlerOp::JumpIndirect(loc) => {
                    let target = self.raw_read(loc);
                    let pc = self.rts[actor.0].pc;
                    if target != pc {
                        self.fault = Some(format!(
                            "handler jumped to {target} but the thread stopped at {pc}"
                        ));
                        return;
                    }
                    frame.pending = Some(Work::running(1, now));
                }
            }
            self.rts[actor.0].frame = Some(frame);
            return;
        }
        let rt = &mut self.rts[actor.0];
        rt.frame = None;
        if let Some(w) = rt.work.as_mut() {
            w.resume(now);
        }
        self.record(actor, EventKind::HandlerEnd);
    }
}

/// The view an enclave actor has of the machine during one step.
pub struct EnclaveCpu<'a> {
    st: &'a mut State,
    actor: ActorId,
}

impl EnclaveCpu<'_> {
    pub fn now(&self) -> Cycle {
        self.st.now
    }

    pub fn actor(&self) -> ActorId {
        self.actor
    }

    /// Number of program steps this actor has completed.
    pub fn pc(&self) -> u64 {
        self.st.rts[self.actor.0].pc
    }

    pub fn read(&mut self, loc: Loc) -> u64 {
        if !self.st.check_enclave_access(self.actor, loc, "read") {
            return 0;
        }
        self.st.raw_read(loc)
    }

    pub fn write(&mut self, loc: Loc, value: u64) {
        if self.st.check_enclave_access(self.actor, loc, "write") {
            self.st.write(self.actor, loc, value);
        }
    }

    pub fn in_enclave(&self) -> bool {
        self.st.rts[self.actor.0].inside
    }

    pub fn eenter(&mut self) {
        if self.in_enclave() {
            self.st.fault = Some("EENTER while already inside the enclave".into());
            return;
        }
        self.st.rts[self.actor.0].inside = true;
        self.st.record(self.actor, EventKind::EEnter);
    }

    pub fn eexit(&mut self) {
        if !self.in_enclave() {
            self.st.fault = Some("EEXIT while outside the enclave".into());
            return;
        }
        self.st.rts[self.actor.0].inside = false;
        self.st.record(self.actor, EventKind::EExit);
    }

    /// Outcome of this actor's most recent transaction.
    pub fn last_tx(&self) -> Option<TxOutcome> {
        self.st.rts[self.actor.0].last_tx
    }

    pub fn note(&mut self, label: &'static str, value: u64) {
        self.st.record(self.actor, EventKind::Note(label, value));
    }
}

/// The view a host actor has: untrusted cells only.
pub struct HostCpu<'a> {
    st: &'a mut State,
    actor: ActorId,
}

impl HostCpu<'_> {
    pub fn now(&self) -> Cycle {
        self.st.now
    }

    pub fn actor(&self) -> ActorId {
        self.actor
    }

    pub fn read(&self, cell: HostCell) -> u64 {
        self.st.raw_read(cell.loc())
    }

    pub fn write(&mut self, cell: HostCell, value: u64) {
        self.st.write(self.actor, cell.loc(), value);
    }

    pub fn note(&mut self, label: &'static str, value: u64) {
        self.st.record(self.actor, EventKind::Note(label, value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enters, runs fixed compute steps, exits and halts.
    struct Spin {
        steps: Vec<u64>,
        i: usize,
        entered: bool,
    }

    impl Spin {
        fn new(steps: Vec<u64>) -> Self {
            Self {
                steps,
                i: 0,
                entered: false,
            }
        }
    }

    impl EnclaveProgram for Spin {
        fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
            if !self.entered {
                self.entered = true;
                cpu.eenter();
            }
            match self.steps.get(self.i) {
                Some(&n) => {
                    self.i += 1;
                    Step::Compute(n)
                }
                None => {
                    cpu.eexit();
                    Step::Halt
                }
            }
        }
    }

    fn spin_run(steps: Vec<u64>, schedule: &InterruptSchedule) -> SimResult {
        let mut k = Kernel::new(TraceLevel::Full);
        let w = k.enclave_actor("worker");
        let mut p = Spin::new(steps);
        k.run(vec![(w, Program::Enclave(&mut p))], schedule, Cycle(1_000_000))
    }

    fn irq(target: usize, i: u64, r: u64) -> ScheduledInterrupt {
        ScheduledInterrupt {
            target: ActorId(target),
            interrupt: Cycle(i),
            resume: Cycle(r),
        }
    }

    #[test]
    fn uninterrupted_run_is_resident_for_its_cost() {
        let r = spin_run(vec![3, 4, 5], &InterruptSchedule::empty());
        assert!(r.trace.is_complete());
        assert_eq!(true_resident_cycles(&r.trace, ActorId(0)).unwrap(), Cycle(12));
        assert!(!r.trace.events.iter().any(|e| e.kind == EventKind::Aex));
    }

    #[test]
    fn interrupt_is_excluded_from_residency_and_spills_marker() {
        let sched = InterruptSchedule::new(vec![irq(0, 5, 25)]).unwrap();
        let r = spin_run(vec![10], &sched);
        assert_eq!(true_resident_cycles(&r.trace, ActorId(0)).unwrap(), Cycle(10));
        assert_eq!(r.trace.end, Cycle(30));
        let spill = r
            .trace
            .events
            .iter()
            .find_map(|e| match e.kind {
                EventKind::Write {
                    loc: Loc::SsaMarker(_),
                    value,
                } => Some((e.cycle, value)),
                _ => None,
            })
            .unwrap();
        assert_eq!(spill.0, Cycle(5));
        assert_ne!(spill.1, MARKER_VALUE);
    }

    #[test]
    fn unknown_actor_is_an_error() {
        let r = spin_run(vec![1], &InterruptSchedule::empty());
        assert_eq!(
            true_resident_cycles(&r.trace, ActorId(4)),
            Err(SimError::UnknownActor(ActorId(4)))
        );
    }

    #[test]
    fn limit_truncates_and_flags_incomplete() {
        let mut k = Kernel::new(TraceLevel::Full);
        let w = k.enclave_actor("worker");
        let mut p = Spin::new(vec![100]);
        let r = k.run(
            vec![(w, Program::Enclave(&mut p))],
            &InterruptSchedule::empty(),
            Cycle(40),
        );
        assert_eq!(r.trace.outcome, Outcome::LimitReached);
        assert_eq!(r.trace.end, Cycle(40));
        assert_eq!(true_resident_cycles(&r.trace, w).unwrap(), Cycle(40));
    }

    #[test]
    fn schedule_rejects_resume_before_interrupt() {
        assert!(InterruptSchedule::new(vec![irq(0, 10, 5)]).is_err());
    }

    /// Runs one transaction and records its outcome in a cell.
    struct TxOnce {
        req: Option<TxRequest>,
        result: Loc,
        phase: u8,
    }

    impl EnclaveProgram for TxOnce {
        fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
            match self.phase {
                0 => {
                    cpu.eenter();
                    self.phase = 1;
                    Step::Tx(self.req.take().unwrap())
                }
                1 => {
                    let code = match cpu.last_tx() {
                        Some(TxOutcome::Committed) => 1,
                        Some(TxOutcome::Aborted(AbortCause::Conflict)) => 2,
                        Some(TxOutcome::Aborted(AbortCause::Interrupt)) => 3,
                        Some(TxOutcome::Aborted(AbortCause::Explicit)) => 4,
                        None => 9,
                    };
                    cpu.write(self.result, code);
                    self.phase = 2;
                    Step::Halt
                }
                _ => unreachable!(),
            }
        }
    }

    /// Writes a value to a cell after a delay.
    struct Poke {
        delay: u64,
        loc: Loc,
        value: u64,
        phase: u8,
    }

    impl EnclaveProgram for Poke {
        fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
            self.phase += 1;
            match self.phase {
                1 => {
                    cpu.eenter();
                    Step::Compute(self.delay)
                }
                2 => {
                    cpu.write(self.loc, self.value);
                    Step::Halt
                }
                _ => unreachable!(),
            }
        }
    }

    fn tx_scenario(poke_at: Option<u64>, schedule: &InterruptSchedule, expect: u64) -> (u64, u64, u64) {
        let mut k = Kernel::new(TraceLevel::Full);
        let txa = k.enclave_actor("tx");
        let other = k.enclave_actor("other");
        let watched = k.enclave_cell("watched", 7);
        let target = k.enclave_cell("target", 100);
        let result = k.enclave_cell("result", 0);
        let scratch = k.enclave_cell("scratch", 0);
        let mut tx = TxOnce {
            req: Some(TxRequest {
                watch: vec![watched],
                body: vec![
                    TxOp::Expect(watched, expect),
                    TxOp::Write(target, 200),
                    TxOp::Compute(10),
                    TxOp::Increment(target),
                ],
            }),
            result,
            phase: 0,
        };
        let mut poke = Poke {
            delay: poke_at.unwrap_or(50),
            loc: if poke_at.is_some() { watched } else { scratch },
            value: if poke_at.is_some() { 8 } else { 0 },
            phase: 0,
        };
        let r = k.run(
            vec![
                (txa, Program::Enclave(&mut tx)),
                (other, Program::Enclave(&mut poke)),
            ],
            schedule,
            Cycle(10_000),
        );
        assert!(r.trace.is_complete(), "{:?}", r.trace.outcome);
        (r.read(result), r.read(target), r.trace.end.0)
    }

    #[test]
    fn undisturbed_transaction_commits() {
        let (res, target, _) = tx_scenario(None, &InterruptSchedule::empty(), 7);
        assert_eq!(res, 1);
        assert_eq!(target, 201);
    }

    #[test]
    fn foreign_write_aborts_and_rolls_back() {
        let (res, target, _) = tx_scenario(Some(4), &InterruptSchedule::empty(), 7);
        assert_eq!(res, 2);
        assert_eq!(target, 100);
    }

    #[test]
    fn own_interrupt_aborts() {
        let sched = InterruptSchedule::new(vec![irq(0, 3, 6)]).unwrap();
        let (res, target, _) = tx_scenario(None, &sched, 7);
        assert_eq!(res, 3);
        assert_eq!(target, 100);
    }

    #[test]
    fn failed_expectation_aborts_explicitly() {
        let (res, target, _) = tx_scenario(None, &InterruptSchedule::empty(), 6);
        assert_eq!(res, 4);
        assert_eq!(target, 100);
    }

    #[test]
    fn nested_transaction_faults() {
        let mut k = Kernel::new(TraceLevel::Full);
        let a = k.enclave_actor("tx");
        let result = k.enclave_cell("result", 0);
        let inner = TxRequest {
            watch: vec![],
            body: vec![],
        };
        let mut tx = TxOnce {
            req: Some(TxRequest {
                watch: vec![],
                body: vec![TxOp::Nested(Box::new(inner))],
            }),
            result,
            phase: 0,
        };
        let r = k.run(
            vec![(a, Program::Enclave(&mut tx))],
            &InterruptSchedule::empty(),
            Cycle(100),
        );
        assert_eq!(r.trace.fault(), Some("nested transaction"));
    }

    struct Writer {
        cell: HostCell,
        loc: Loc,
        phase: u8,
    }

    impl HostProgram for Writer {
        fn step(&mut self, cpu: &mut HostCpu<'_>) -> Step {
            self.phase += 1;
            if self.phase == 1 {
                cpu.write(self.cell, 5);
                Step::WaitFor(vec![self.loc])
            } else {
                Step::Halt
            }
        }
    }

    struct OutsideReader {
        loc: Loc,
    }

    impl EnclaveProgram for OutsideReader {
        fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
            cpu.read(self.loc);
            Step::Halt
        }
    }

    #[test]
    fn host_cells_are_shared_and_enclave_cells_need_entry() {
        let mut k = Kernel::new(TraceLevel::Full);
        let w = k.enclave_actor("worker");
        let os = k.host_actor("os");
        let secret = k.enclave_cell("secret", 1);
        let mut reader = OutsideReader { loc: secret };
        let shared = k.host_cell("shared", 0);
        let mut writer = Writer {
            cell: shared,
            loc: shared.loc(),
            phase: 0,
        };
        let r = k.run(
            vec![
                (w, Program::Enclave(&mut reader)),
                (os, Program::Host(&mut writer)),
            ],
            &InterruptSchedule::empty(),
            Cycle(100),
        );
        assert!(r.trace.fault().unwrap().contains("outside the enclave"));
    }

    #[test]
    fn host_actor_is_preempted_without_touching_any_ssa() {
        let mut k = Kernel::new(TraceLevel::Full);
        let os = k.host_actor("os");
        let shared = k.host_cell("shared", 0);
        struct Busy(u8);
        impl HostProgram for Busy {
            fn step(&mut self, _: &mut HostCpu<'_>) -> Step {
                self.0 += 1;
                if self.0 == 1 {
                    Step::Compute(10)
                } else {
                    Step::Halt
                }
            }
        }
        let mut p = Busy(0);
        let sched = InterruptSchedule::new(vec![irq(0, 2, 8)]).unwrap();
        let r = k.run(vec![(os, Program::Host(&mut p))], &sched, Cycle(100));
        assert_eq!(r.trace.end, Cycle(16));
        assert_eq!(r.read_host(shared), 0);
        assert!(r.trace.events.iter().any(|e| e.kind == EventKind::Preempt));
        assert!(!r
            .trace
            .events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Write { .. })));
    }

    /// Installs a handler into another actor's SSA whenever its marker drops.
    struct Installer {
        victim: ActorId,
        handler: HandlerInfo,
        saved: Loc,
        target_rip: Option<u64>,
        done: Loc,
    }

    impl EnclaveProgram for Installer {
        fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
            if !cpu.in_enclave() {
                cpu.eenter();
            }
            if cpu.read(self.done) == 1 {
                return Step::Halt;
            }
            let marker = Loc::SsaMarker(self.victim);
            let rip = Loc::SsaRip(self.victim);
            if cpu.read(marker) != MARKER_VALUE {
                let current = cpu.read(rip);
                if !self.handler.contains(current) {
                    cpu.write(self.saved, self.target_rip.unwrap_or(current));
                    cpu.write(rip, self.handler.entry);
                }
            }
            Step::WaitFor(vec![marker, rip, self.done])
        }
    }

    struct Victim {
        marker: Loc,
        done: Loc,
        phase: u8,
    }

    impl EnclaveProgram for Victim {
        fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
            self.phase += 1;
            match self.phase {
                1 => {
                    cpu.eenter();
                    cpu.write(self.marker, MARKER_VALUE);
                    Step::Compute(20)
                }
                2 => Step::Compute(5),
                _ => {
                    cpu.write(self.done, 1);
                    Step::Halt
                }
            }
        }
    }

    fn handler_run(bad_target: Option<u64>, sched: &InterruptSchedule) -> SimResult {
        let mut k = Kernel::new(TraceLevel::Full);
        let installer = k.enclave_actor("timer");
        let victim = k.enclave_actor("worker");
        let saved = k.enclave_cell("saved_rip", 0);
        let done = k.enclave_cell("done", 0);
        let marker = Loc::SsaMarker(victim);
        let handler = k.register_handler(vec![
            HandlerOp::Compute(4),
            HandlerOp::Write(marker, MARKER_VALUE),
            HandlerOp::Compute(2),
            HandlerOp::JumpIndirect(saved),
        ]);
        let mut i = Installer {
            victim,
            handler,
            saved,
            target_rip: bad_target,
            done,
        };
        let mut v = Victim {
            marker,
            done,
            phase: 0,
        };
        k.run(
            vec![
                (installer, Program::Enclave(&mut i)),
                (victim, Program::Enclave(&mut v)),
            ],
            sched,
            Cycle(10_000),
        )
    }

    #[test]
    fn handler_restores_marker_and_returns_to_interrupted_step() {
        let sched = InterruptSchedule::new(vec![irq(1, 10, 30)]).unwrap();
        let r = handler_run(None, &sched);
        assert!(r.trace.is_complete(), "{:?}", r.trace.outcome);
        assert_eq!(r.read(Loc::SsaMarker(ActorId(1))), MARKER_VALUE);
        // 25 cycles of work plus 8 handler cycles, with a 20-cycle gap.
        assert_eq!(true_resident_cycles(&r.trace, ActorId(1)).unwrap(), Cycle(33));
        assert_eq!(r.trace.end, Cycle(53));
        assert!(r
            .trace
            .events
            .iter()
            .any(|e| e.kind == EventKind::Eresume { handler: true }));
    }

    #[test]
    fn handler_interrupted_midway_restarts_from_its_address() {
        let sched = InterruptSchedule::new(vec![irq(1, 10, 30), irq(1, 32, 40)]).unwrap();
        let r = handler_run(None, &sched);
        assert!(r.trace.is_complete(), "{:?}", r.trace.outcome);
        assert_eq!(r.read(Loc::SsaMarker(ActorId(1))), MARKER_VALUE);
        // The first handler run is cut after 2 cycles; the second run is complete.
        assert_eq!(true_resident_cycles(&r.trace, ActorId(1)).unwrap(), Cycle(35));
    }

    #[test]
    fn handler_jump_to_wrong_address_faults() {
        let sched = InterruptSchedule::new(vec![irq(1, 10, 30)]).unwrap();
        let r = handler_run(Some(999), &sched);
        assert!(r.trace.fault().unwrap().contains("handler jumped"));
    }

    #[test]
    fn trace_export_has_one_line_per_event() {
        let r = spin_run(vec![2], &InterruptSchedule::empty());
        let text = r.trace.export_text();
        assert_eq!(text.lines().count(), r.trace.events.len() + 2);
        assert!(text.starts_with("cycle,actor,event,detail\n0,worker,start,"));
    }

    fn schedule_strategy(actors: usize) -> impl Strategy<Value = InterruptSchedule> {
        proptest::collection::vec((0..actors, 0u64..120, 0u64..30), 0..8).prop_map(|v| {
            InterruptSchedule::new(
                v.into_iter()
                    .map(|(a, i, len)| irq(a, i, i + len))
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn kernel_tally_matches_event_walk(
            steps in proptest::collection::vec(1u64..20, 1..10),
            sched in schedule_strategy(1),
        ) {
            let r = spin_run(steps.clone(), &sched);
            prop_assert!(r.trace.is_complete());
            let walked: u64 = r.trace.resident_intervals(ActorId(0)).iter().map(|(a, b)| *b - *a).sum();
            let tally = true_resident_cycles(&r.trace, ActorId(0)).unwrap().0;
            prop_assert_eq!(walked, tally);
            prop_assert_eq!(tally, steps.iter().sum::<u64>());
        }

        #[test]
        fn overlapping_interrupts_are_deterministic(sched in schedule_strategy(2)) {
            let first = handler_run(None, &sched).trace.export_text();
            for _ in 0..3 {
                prop_assert_eq!(&handler_run(None, &sched).trace.export_text(), &first);
            }
        }

        #[test]
        fn aborted_transactions_leave_no_writes(
            poke in 0u64..20,
            sched in schedule_strategy(2),
        ) {
            let (res, target, _) = tx_scenario(Some(poke), &sched, 7);
            if res == 1 {
                prop_assert_eq!(target, 201);
            } else {
                prop_assert_eq!(target, 100);
            }
        }
    }
}
