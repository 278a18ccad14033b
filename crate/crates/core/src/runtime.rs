//! Metered execution of one invocation inside the simulated enclave.
//!
//! Actor layout: timer threads first, then the worker thread. The worker
//! enters the enclave, performs the request setup, checks the function hash,
//! arms the meter (SSA marker, proc flag) and steps the VM one instruction
//! per kernel step. Network OCALLs clear proc, wait for the timer to settle
//! its in-flight tick, leave the enclave for the host I/O and re-arm on
//! return.

use thiserror::Error;

use crate::crypto::{hash, Digest};
use crate::metering::{
    register_eresume_handler, MemState, MeterCells, MeterError, NetState, TimerConfig,
    TimerProgram,
};
use crate::sim::{
    ActorId, Cycle, EnclaveCpu, EnclaveProgram, EventKind, InterruptSchedule, Kernel, Loc,
    Outcome, Program, ScheduledInterrupt, SimError, SimTrace, Step, TraceLevel, MARKER_VALUE,
};
use crate::vm::{
    CostTable, FunctionImage, MemoryHooks, NetOp, Vm, VmLimits, VmResult, VmStep,
};

pub const NOTE_METER_ON: &str = "meter_on";
pub const NOTE_METER_OFF: &str = "meter_off";
pub const NOTE_ALLOC: &str = "alloc";
pub const NOTE_FREE: &str = "free";
pub const NOTE_VM_INSTRUCTIONS: &str = "vm_instructions";
pub const NOTE_WRONG_FUNCTION: &str = "wrong_function";
pub const NOTE_OCALL_PAUSE: &str = "ocall_pause";
pub const NOTE_OCALL_RESUME: &str = "ocall_resume";

/// Interrupt targets named by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Worker,
    Timer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HostInterrupt {
    pub target: Target,
    pub interrupt: u64,
    pub resume: u64,
}

impl HostInterrupt {
    pub fn new(target: Target, interrupt: u64, resume: u64) -> Self {
        Self {
            target,
            interrupt,
            resume,
        }
    }
}

/// Host-side cost of each network OCALL, in cycles spent outside the enclave.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetworkModel {
    pub default_cycles: u64,
    /// Per-OCALL overrides by call index.
    pub overrides: Vec<(usize, u64)>,
}

impl NetworkModel {
    pub fn fixed(cycles: u64) -> Self {
        Self {
            default_cycles: cycles,
            overrides: Vec::new(),
        }
    }

    pub fn cycles_for(&self, index: usize) -> u64 {
        self.overrides
            .iter()
            .rev()
            .find(|(i, _)| *i == index)
            .map_or(self.default_cycles, |(_, c)| *c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub timer: TimerConfig,
    pub timers: usize,
    pub timer_start: u64,
    pub worker_start: u64,
    /// Request decryption and checks before the meter is armed.
    pub setup_cycles: u64,
    pub load_cycles_per_byte: u64,
    /// Count sandbox instantiation of the function in the measurement.
    pub include_load: bool,
    pub network: NetworkModel,
    pub limits: VmLimits,
    pub costs: CostTable,
    pub trace_level: TraceLevel,
    pub cycle_limit: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            timer: TimerConfig::default(),
            timers: 1,
            timer_start: 0,
            worker_start: 0,
            setup_cycles: 200,
            load_cycles_per_byte: 1,
            include_load: false,
            network: NetworkModel::fixed(2_000),
            limits: VmLimits::default(),
            costs: CostTable::default(),
            trace_level: TraceLevel::Full,
            cycle_limit: 1 << 40,
        }
    }
}

impl RunConfig {
    pub fn with_timer(tau: u64, epsilon: u64) -> Result<Self, MeterError> {
        Ok(Self {
            timer: TimerConfig::new(tau, epsilon)?,
            ..Self::default()
        })
    }

    pub fn worker_actor(&self) -> ActorId {
        ActorId(self.timers)
    }

    pub fn timer_actor(&self, i: usize) -> ActorId {
        ActorId(i)
    }

    pub fn schedule(&self, events: &[HostInterrupt]) -> Result<InterruptSchedule, RuntimeError> {
        let mut out = Vec::with_capacity(events.len());
        for e in events {
            let target = match e.target {
                Target::Worker => self.worker_actor(),
                Target::Timer(i) if i < self.timers => self.timer_actor(i),
                Target::Timer(i) => return Err(RuntimeError::Schedule(SimError::UnknownActor(ActorId(i)))),
            };
            out.push(ScheduledInterrupt {
                target,
                interrupt: Cycle(e.interrupt),
                resume: Cycle(e.resume),
            });
        }
        InterruptSchedule::new(out).map_err(RuntimeError::Schedule)
    }
}

/// One invocation to execute.
#[derive(Debug, Clone, Copy)]
pub struct RunRequest<'a> {
    pub image: &'a FunctionImage,
    pub input: &'a [u8],
    /// Function hash named by the client.
    pub expected_hash: Digest,
    pub default_tag: Digest,
}

impl<'a> RunRequest<'a> {
    pub fn new(image: &'a FunctionImage, input: &'a [u8]) -> Self {
        Self {
            image,
            input,
            expected_hash: image.function_hash,
            default_tag: hash(b""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("invalid schedule: {0}")]
    Schedule(SimError),
    #[error("simulation fault: {0}")]
    Fault(String),
    #[error("simulation hit the cycle limit")]
    LimitReached,
    #[error("simulation deadlocked")]
    Deadlock,
    #[error("accounting: {0}")]
    Accounting(MeterError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    Executed(VmResult),
    /// The named hash did not match; no function instruction ran.
    WrongFunction,
}

#[derive(Debug, Clone)]
pub struct MeteredRun {
    pub outcome: RunOutcome,
    pub tau: u64,
    pub t_max: u64,
    pub m_int: u64,
    pub m_max: u64,
    pub mem_events: u64,
    pub net: u64,
    pub tag: Digest,
    pub vm_instructions: u64,
    pub vm_cycles: u64,
    pub ocalls: u64,
    pub worker: ActorId,
    pub timers: Vec<ActorId>,
    pub trace: SimTrace,
}

impl MeteredRun {
    pub fn true_resident_cycles(&self) -> u64 {
        crate::sim::true_resident_cycles(&self.trace, self.worker)
            .expect("worker exists")
            .get()
    }

    /// Cycle window in which the meter was armed.
    pub fn meter_window(&self) -> Option<(Cycle, Cycle)> {
        let mut on = None;
        let mut off = None;
        for e in self.trace.events_of(self.worker) {
            match e.kind {
                EventKind::Note(NOTE_METER_ON, _) => on = Some(e.cycle),
                EventKind::Note(NOTE_METER_OFF, _) => off = Some(e.cycle),
                _ => {}
            }
        }
        Some((on?, off?))
    }

    /// Worker residency inside the armed window, derived from the trace.
    pub fn metered_resident_cycles(&self) -> u64 {
        let Some((on, off)) = self.meter_window() else {
            return 0;
        };
        self.trace
            .resident_intervals(self.worker)
            .iter()
            .map(|&(s, e)| {
                let (s, e) = (s.max(on), e.min(off));
                if e > s {
                    e - s
                } else {
                    0
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Enter,
    Setup,
    Check,
    Load,
    Run,
    OcallPause,
    OcallDrain,
    OcallHost,
    OcallResume,
    Finish,
}

struct MeterHooks<'c, 'a> {
    cpu: &'c mut EnclaveCpu<'a>,
    mem: &'c mut MemState,
    t: Loc,
}

impl MemoryHooks for MeterHooks<'_, '_> {
    fn read_tick(&mut self) -> u64 {
        self.cpu.read(self.t)
    }

    fn on_alloc(&mut self, bytes: u64, t_now: u64) -> Result<(), String> {
        let delta = i64::try_from(bytes).map_err(|_| MeterError::Overflow.to_string())?;
        self.mem.mem_update(delta, t_now).map_err(|e| e.to_string())?;
        self.cpu.note(NOTE_ALLOC, bytes);
        Ok(())
    }

    fn on_free(&mut self, bytes: u64, t_now: u64) -> Result<(), String> {
        let delta = i64::try_from(bytes).map_err(|_| MeterError::Overflow.to_string())?;
        self.mem.mem_update(-delta, t_now).map_err(|e| e.to_string())?;
        self.cpu.note(NOTE_FREE, bytes);
        Ok(())
    }
}

/// The worker thread of one invocation.
pub struct WorkerProgram<'a> {
    vm: Vm<'a>,
    cells: MeterCells,
    phase: Phase,
    hash_ok: bool,
    setup_cycles: u64,
    load_cycles: u64,
    include_load: bool,
    network: NetworkModel,
    armed: bool,
    pending: Option<NetOp>,
    ocalls: usize,
    mem: MemState,
    net: NetState,
    t_max: u64,
    final_mem: Option<Result<(u64, u64), MeterError>>,
}

impl<'a> WorkerProgram<'a> {
    fn new(request: &RunRequest<'a>, config: &RunConfig, cells: MeterCells) -> Self {
        Self {
            vm: Vm::with_costs(
                request.image,
                request.input,
                config.limits,
                request.default_tag,
                config.costs,
            ),
            cells,
            phase: Phase::Enter,
            hash_ok: request.expected_hash == request.image.function_hash,
            setup_cycles: config.setup_cycles,
            load_cycles: config.load_cycles_per_byte * request.image.bytecode.len() as u64,
            include_load: config.include_load,
            network: config.network.clone(),
            armed: false,
            pending: None,
            ocalls: 0,
            mem: MemState::new(),
            net: NetState::default(),
            t_max: 0,
            final_mem: None,
        }
    }

    fn arm(&mut self, cpu: &mut EnclaveCpu<'_>) {
        cpu.write(self.cells.marker(), MARKER_VALUE);
        cpu.write(self.cells.proc, 1);
        cpu.note(NOTE_METER_ON, 0);
        self.armed = true;
    }
}

impl EnclaveProgram for WorkerProgram<'_> {
    fn step(&mut self, cpu: &mut EnclaveCpu<'_>) -> Step {
        let c = self.cells;
        loop {
            match self.phase {
                Phase::Enter => {
                    cpu.eenter();
                    self.phase = Phase::Setup;
                }
                Phase::Setup => {
                    self.phase = Phase::Check;
                    if self.setup_cycles > 0 {
                        return Step::Compute(self.setup_cycles);
                    }
                }
                Phase::Check => {
                    if !self.hash_ok {
                        cpu.note(NOTE_WRONG_FUNCTION, 0);
                        self.phase = Phase::Finish;
                        continue;
                    }
                    if self.include_load {
                        self.arm(cpu);
                    }
                    self.phase = Phase::Load;
                    if self.load_cycles > 0 {
                        return Step::Compute(self.load_cycles);
                    }
                }
                Phase::Load => {
                    if !self.armed {
                        self.arm(cpu);
                    }
                    self.phase = Phase::Run;
                }
                Phase::Run => {
                    let mut hooks = MeterHooks {
                        cpu: &mut *cpu,
                        mem: &mut self.mem,
                        t: c.t,
                    };
                    match self.vm.step(&mut hooks) {
                        VmStep::Ran { cost } => return Step::Compute(cost),
                        VmStep::Ocall { cost, op } => {
                            self.pending = Some(op);
                            self.phase = Phase::OcallPause;
                            return Step::Compute(cost);
                        }
                        VmStep::Finished => self.phase = Phase::Finish,
                    }
                }
                Phase::OcallPause => {
                    cpu.write(c.proc, 0);
                    cpu.note(NOTE_OCALL_PAUSE, self.ocalls as u64);
                    self.phase = Phase::OcallDrain;
                }
                Phase::OcallDrain => {
                    if cpu.read(c.busy) != 0 {
                        return Step::WaitFor(vec![c.busy]);
                    }
                    cpu.eexit();
                    self.phase = Phase::OcallHost;
                }
                Phase::OcallHost => {
                    let cycles = self.network.cycles_for(self.ocalls);
                    self.ocalls += 1;
                    self.phase = Phase::OcallResume;
                    if cycles > 0 {
                        return Step::Compute(cycles);
                    }
                }
                Phase::OcallResume => {
                    cpu.eenter();
                    let op = self.pending.take().expect("pending OCALL");
                    let (sent, received) = match op {
                        NetOp::Send { bytes } => (bytes, 0),
                        NetOp::Recv { bytes } => (0, bytes),
                    };
                    self.net.net_add(sent, received);
                    cpu.note(NOTE_OCALL_RESUME, sent + received);
                    cpu.write(c.marker(), MARKER_VALUE);
                    cpu.write(c.proc, 1);
                    self.vm.complete_ocall(received);
                    self.phase = Phase::Run;
                }
                Phase::Finish => {
                    if self.armed {
                        cpu.write(c.proc, 0);
                        self.t_max = cpu.read(c.t);
                        cpu.write(c.t_max, self.t_max);
                        cpu.note(NOTE_METER_OFF, self.t_max);
                    }
                    cpu.write(c.finished, 1);
                    cpu.note(NOTE_VM_INSTRUCTIONS, self.vm.instructions_executed());
                    self.final_mem = Some(self.mem.mem_finalize(self.t_max));
                    cpu.eexit();
                    return Step::Halt;
                }
            }
        }
    }
}

/// Executes one invocation under the meter with the given host interrupts.
pub fn run_metered(
    request: &RunRequest<'_>,
    config: &RunConfig,
    interrupts: &[HostInterrupt],
) -> Result<MeteredRun, RuntimeError> {
    assert!(config.timers >= 1, "at least one timer thread");
    let schedule = config.schedule(interrupts)?;
    let mut kernel = Kernel::new(config.trace_level);
    let timers: Vec<ActorId> = (0..config.timers)
        .map(|i| {
            let id = kernel.enclave_actor(&format!("timer{i}"));
            kernel.delay_start(id, Cycle(config.timer_start));
            id
        })
        .collect();
    let worker = kernel.enclave_actor("worker");
    kernel.delay_start(worker, Cycle(config.worker_start));
    let cells = MeterCells::allocate(&mut kernel, worker);
    let handler = register_eresume_handler(&mut kernel, &cells);

    let mut timer_programs: Vec<TimerProgram> = timers
        .iter()
        .map(|_| TimerProgram::new(config.timer, cells, handler))
        .collect();
    let mut worker_program = WorkerProgram::new(request, config, cells);
    let mut programs: Vec<(ActorId, Program<'_>)> = timers
        .iter()
        .zip(timer_programs.iter_mut())
        .map(|(&id, p)| (id, Program::Enclave(p as &mut dyn EnclaveProgram)))
        .collect();
    programs.push((worker, Program::Enclave(&mut worker_program)));

    let result = kernel.run(programs, &schedule, Cycle(config.cycle_limit));
    let trace = result.trace;
    match &trace.outcome {
        Outcome::Completed => {}
        Outcome::Fault(m) => return Err(RuntimeError::Fault(m.clone())),
        Outcome::LimitReached => return Err(RuntimeError::LimitReached),
        Outcome::Deadlock => return Err(RuntimeError::Deadlock),
    }
    let (m_int, m_max) = worker_program
        .final_mem
        .expect("worker finished")
        .map_err(RuntimeError::Accounting)?;
    let vm_instructions = worker_program.vm.instructions_executed();
    let vm_cycles = worker_program.vm.cycles_charged();
    let outcome = if worker_program.hash_ok {
        RunOutcome::Executed(worker_program.vm.into_result().expect("vm finished"))
    } else {
        RunOutcome::WrongFunction
    };
    let tag = match &outcome {
        RunOutcome::Executed(r) => r.tag,
        RunOutcome::WrongFunction => request.default_tag,
    };
    Ok(MeteredRun {
        outcome,
        tau: config.timer.tau,
        t_max: worker_program.t_max,
        m_int,
        m_max,
        mem_events: worker_program.mem.events,
        net: worker_program.net.net,
        tag,
        vm_instructions,
        vm_cycles,
        ocalls: worker_program.ocalls as u64,
        worker,
        timers,
        trace,
    })
}
