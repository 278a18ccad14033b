//! Sandboxed stack-machine interpreter for provisioned functions.
//!
//! File layout: `"MFVM"`, version byte, entry instruction index (u32 BE),
//! code length in bytes (u32 BE), code. Jump operands are instruction
//! indices. Inputs are byte strings read as little-endian u64 words; `OUT`
//! appends one little-endian word to the output.
//!
//! Heap blocks are opaque handles. Every allocator instruction reports the
//! byte delta through [`MemoryHooks`], and network instructions leave the
//! interpreter through an OCALL that the caller completes.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::crypto::{hash, Digest};

pub const MAGIC: &[u8; 4] = b"MFVM";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 13;
const LOCALS: usize = 256;
const MAX_STACK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    Halt,
    Push(u64),
    Pop,
    Dup,
    Swap,
    Over,
    Get(u8),
    Set(u8),
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Lt,
    Gt,
    Jmp(u32),
    Jz(u32),
    Jnz(u32),
    Alloc,
    Realloc,
    Free,
    Load,
    Store,
    NetSend,
    NetRecv,
    Arg(u8),
    InLen,
    Out,
    SetTag,
}

impl Instr {
    fn opcode(&self) -> u8 {
        match self {
            Instr::Halt => 0x00,
            Instr::Push(_) => 0x01,
            Instr::Pop => 0x02,
            Instr::Dup => 0x03,
            Instr::Swap => 0x04,
            Instr::Over => 0x05,
            Instr::Get(_) => 0x06,
            Instr::Set(_) => 0x07,
            Instr::Add => 0x10,
            Instr::Sub => 0x11,
            Instr::Mul => 0x12,
            Instr::Div => 0x13,
            Instr::Mod => 0x14,
            Instr::Eq => 0x18,
            Instr::Lt => 0x19,
            Instr::Gt => 0x1a,
            Instr::Jmp(_) => 0x20,
            Instr::Jz(_) => 0x21,
            Instr::Jnz(_) => 0x22,
            Instr::Alloc => 0x30,
            Instr::Realloc => 0x31,
            Instr::Free => 0x32,
            Instr::Load => 0x33,
            Instr::Store => 0x34,
            Instr::NetSend => 0x40,
            Instr::NetRecv => 0x41,
            Instr::Arg(_) => 0x50,
            Instr::InLen => 0x51,
            Instr::Out => 0x58,
            Instr::SetTag => 0x59,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.opcode());
        match *self {
            Instr::Push(v) => out.extend_from_slice(&v.to_be_bytes()),
            Instr::Get(i) | Instr::Set(i) | Instr::Arg(i) => out.push(i),
            Instr::Jmp(t) | Instr::Jz(t) | Instr::Jnz(t) => out.extend_from_slice(&t.to_be_bytes()),
            _ => {}
        }
    }

    fn jump_target(&self) -> Option<u32> {
        match *self {
            Instr::Jmp(t) | Instr::Jz(t) | Instr::Jnz(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("load error at byte {offset}: {reason}")]
pub struct LoadError {
    pub offset: usize,
    pub reason: String,
}

fn load_err(offset: usize, reason: impl Into<String>) -> LoadError {
    LoadError {
        offset,
        reason: reason.into(),
    }
}

/// A loaded function. `function_hash` covers the exact file bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionImage {
    pub bytecode: Vec<u8>,
    pub entry: u32,
    pub function_hash: Digest,
    instrs: Vec<Instr>,
}

impl FunctionImage {
    pub fn instructions(&self) -> &[Instr] {
        &self.instrs
    }
}

pub fn encode_program(instrs: &[Instr], entry: u32) -> Vec<u8> {
    let mut code = Vec::new();
    for i in instrs {
        i.encode(&mut code);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + code.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&entry.to_be_bytes());
    out.extend_from_slice(&(code.len() as u32).to_be_bytes());
    out.extend_from_slice(&code);
    out
}

pub fn vm_load(bytes: &[u8]) -> Result<FunctionImage, LoadError> {
    if bytes.len() < HEADER_LEN {
        return Err(load_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(load_err(0, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(load_err(4, format!("unsupported version {}", bytes[4])));
    }
    let entry = u32::from_be_bytes(bytes[5..9].try_into().unwrap());
    let code_len = u32::from_be_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let code = &bytes[HEADER_LEN..];
    if code.len() != code_len {
        return Err(load_err(
            9,
            format!("code length {code_len} but {} bytes follow", code.len()),
        ));
    }
    let mut instrs = Vec::new();
    let mut offsets = Vec::new();
    let mut pos = 0;
    while pos < code.len() {
        let at = HEADER_LEN + pos;
        let op = code[pos];
        let operand = |n: usize| -> Result<&[u8], LoadError> {
            code.get(pos + 1..pos + 1 + n)
                .ok_or_else(|| load_err(at, "truncated operand"))
        };
        let (instr, len) = match op {
            0x00 => (Instr::Halt, 1),
            0x01 => (
                Instr::Push(u64::from_be_bytes(operand(8)?.try_into().unwrap())),
                9,
            ),
            0x02 => (Instr::Pop, 1),
            0x03 => (Instr::Dup, 1),
            0x04 => (Instr::Swap, 1),
            0x05 => (Instr::Over, 1),
            0x06 => (Instr::Get(operand(1)?[0]), 2),
            0x07 => (Instr::Set(operand(1)?[0]), 2),
            0x10 => (Instr::Add, 1),
            0x11 => (Instr::Sub, 1),
            0x12 => (Instr::Mul, 1),
            0x13 => (Instr::Div, 1),
            0x14 => (Instr::Mod, 1),
            0x18 => (Instr::Eq, 1),
            0x19 => (Instr::Lt, 1),
            0x1a => (Instr::Gt, 1),
            0x20..=0x22 => {
                let t = u32::from_be_bytes(operand(4)?.try_into().unwrap());
                let i = match op {
                    0x20 => Instr::Jmp(t),
                    0x21 => Instr::Jz(t),
                    _ => Instr::Jnz(t),
                };
                (i, 5)
            }
            0x30 => (Instr::Alloc, 1),
            0x31 => (Instr::Realloc, 1),
            0x32 => (Instr::Free, 1),
            0x33 => (Instr::Load, 1),
            0x34 => (Instr::Store, 1),
            0x40 => (Instr::NetSend, 1),
            0x41 => (Instr::NetRecv, 1),
            0x50 => (Instr::Arg(operand(1)?[0]), 2),
            0x51 => (Instr::InLen, 1),
            0x58 => (Instr::Out, 1),
            0x59 => (Instr::SetTag, 1),
            other => return Err(load_err(at, format!("unknown opcode {other:#04x}"))),
        };
        instrs.push(instr);
        offsets.push(at);
        pos += len;
    }
    if instrs.is_empty() {
        return Err(load_err(HEADER_LEN, "empty program"));
    }
    for (i, instr) in instrs.iter().enumerate() {
        if let Some(t) = instr.jump_target() {
            if t as usize >= instrs.len() {
                return Err(load_err(offsets[i], format!("jump target {t} out of range")));
            }
        }
    }
    if entry as usize >= instrs.len() {
        return Err(load_err(5, format!("entry {entry} out of range")));
    }
    Ok(FunctionImage {
        bytecode: bytes.to_vec(),
        entry,
        function_hash: hash(bytes),
        instrs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmLimits {
    pub max_steps: u64,
    pub max_memory: u64,
    pub max_output: u64,
}

impl VmLimits {
    pub fn new(max_steps: u64, max_memory: u64, max_output: u64) -> Option<Self> {
        (max_steps > 0 && max_memory > 0 && max_output > 0).then_some(Self {
            max_steps,
            max_memory,
            max_output,
        })
    }
}

impl Default for VmLimits {
    fn default() -> Self {
        Self {
            max_steps: 50_000_000,
            max_memory: 64 << 20,
            max_output: 1 << 20,
        }
    }
}

/// Cycle charges per instruction class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostTable {
    pub base: u64,
    pub alloc: u64,
    pub net: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        Self {
            base: 1,
            alloc: 10,
            net: 5,
        }
    }
}

impl CostTable {
    pub fn cost(&self, instr: &Instr) -> u64 {
        match instr {
            Instr::Alloc | Instr::Realloc | Instr::Free => self.alloc,
            Instr::NetSend | Instr::NetRecv => self.net,
            _ => self.base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrapReason {
    StepBudget,
    MemoryBudget,
    OutputBudget,
    StackOverflow,
    StackUnderflow,
    DivideByZero,
    InvalidHandle,
    OutOfBounds,
    FellOffEnd,
    /// The metering hooks refused the event.
    Accounting(String),
}

impl fmt::Display for TrapReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrapReason::StepBudget => f.write_str("budget: instruction limit exceeded"),
            TrapReason::MemoryBudget => f.write_str("budget: memory limit exceeded"),
            TrapReason::OutputBudget => f.write_str("budget: output limit exceeded"),
            TrapReason::StackOverflow => f.write_str("budget: stack overflow"),
            TrapReason::StackUnderflow => f.write_str("fault: stack underflow"),
            TrapReason::DivideByZero => f.write_str("fault: division by zero"),
            TrapReason::InvalidHandle => f.write_str("fault: invalid memory handle"),
            TrapReason::OutOfBounds => f.write_str("fault: access outside block"),
            TrapReason::FellOffEnd => f.write_str("fault: ran past the last instruction"),
            TrapReason::Accounting(m) => write!(f, "fault: accounting: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VmStatus {
    Ok,
    Trapped(TrapReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmResult {
    pub output: Vec<u8>,
    pub tag: Digest,
    pub status: VmStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetOp {
    Send { bytes: u64 },
    Recv { bytes: u64 },
}

/// Allocator instrumentation.
pub trait MemoryHooks {
    /// Last completed tick.
    fn read_tick(&mut self) -> u64;
    fn on_alloc(&mut self, bytes: u64, t_now: u64) -> Result<(), String>;
    fn on_free(&mut self, bytes: u64, t_now: u64) -> Result<(), String>;
}

/// Network OCALLs for run-to-completion execution.
pub trait NetworkHooks {
    /// Performs the OCALL (pause, host I/O, resume); returns bytes received.
    fn ocall(&mut self, op: NetOp) -> u64;
    fn on_net(&mut self, sent: u64, received: u64);
}

/// Hooks that meter nothing and echo network requests.
#[derive(Debug, Default, Clone)]
pub struct NullHooks {
    pub net: u64,
    pub live: u64,
}

impl MemoryHooks for NullHooks {
    fn read_tick(&mut self) -> u64 {
        0
    }
    fn on_alloc(&mut self, bytes: u64, _: u64) -> Result<(), String> {
        self.live += bytes;
        Ok(())
    }
    fn on_free(&mut self, bytes: u64, _: u64) -> Result<(), String> {
        self.live -= bytes;
        Ok(())
    }
}

impl NetworkHooks for NullHooks {
    fn ocall(&mut self, op: NetOp) -> u64 {
        match op {
            NetOp::Send { .. } => 0,
            NetOp::Recv { bytes } => bytes,
        }
    }
    fn on_net(&mut self, sent: u64, received: u64) {
        self.net += sent + received;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VmStep {
    Ran { cost: u64 },
    /// The caller must perform the OCALL and call [`Vm::complete_ocall`].
    Ocall { cost: u64, op: NetOp },
    Finished,
}

#[derive(Debug, Clone)]
struct Block {
    words: Vec<u64>,
    bytes: u64,
}

/// One execution of a function image.
#[derive(Debug, Clone)]
pub struct Vm<'a> {
    image: &'a FunctionImage,
    input: Vec<u8>,
    limits: VmLimits,
    costs: CostTable,
    pc: usize,
    stack: Vec<u64>,
    locals: Vec<u64>,
    heap: Vec<Option<Block>>,
    live_bytes: u64,
    output: Vec<u8>,
    tag: Digest,
    steps: u64,
    cycles: u64,
    pending: Option<NetOp>,
    result: Option<VmResult>,
}

fn block_bytes(words: &[u64], len: u64) -> Vec<u8> {
    words
        .iter()
        .flat_map(|w| w.to_le_bytes())
        .take(len as usize)
        .collect()
}

impl<'a> Vm<'a> {
    pub fn new(image: &'a FunctionImage, input: &[u8], limits: VmLimits, default_tag: Digest) -> Self {
        Self::with_costs(image, input, limits, default_tag, CostTable::default())
    }

    pub fn with_costs(
        image: &'a FunctionImage,
        input: &[u8],
        limits: VmLimits,
        default_tag: Digest,
        costs: CostTable,
    ) -> Self {
        Self {
            image,
            input: input.to_vec(),
            limits,
            costs,
            pc: image.entry as usize,
            stack: Vec::new(),
            locals: vec![0; LOCALS],
            heap: Vec::new(),
            live_bytes: 0,
            output: Vec::new(),
            tag: default_tag,
            steps: 0,
            cycles: 0,
            pending: None,
            result: None,
        }
    }

    pub fn instructions_executed(&self) -> u64 {
        self.steps
    }

    pub fn cycles_charged(&self) -> u64 {
        self.cycles
    }

    pub fn result(&self) -> Option<&VmResult> {
        self.result.as_ref()
    }

    pub fn into_result(self) -> Option<VmResult> {
        self.result
    }

    fn finish(&mut self, status: VmStatus) -> VmStep {
        self.result = Some(VmResult {
            output: std::mem::take(&mut self.output),
            tag: self.tag,
            status,
        });
        VmStep::Finished
    }

    fn pop(&mut self) -> Result<u64, TrapReason> {
        self.stack.pop().ok_or(TrapReason::StackUnderflow)
    }

    fn push(&mut self, v: u64) -> Result<(), TrapReason> {
        if self.stack.len() >= MAX_STACK {
            return Err(TrapReason::StackOverflow);
        }
        self.stack.push(v);
        Ok(())
    }

    fn block(&mut self, handle: u64) -> Result<&mut Block, TrapReason> {
        let idx = handle.checked_sub(1).ok_or(TrapReason::InvalidHandle)? as usize;
        self.heap
            .get_mut(idx)
            .and_then(|b| b.as_mut())
            .ok_or(TrapReason::InvalidHandle)
    }

    fn input_word(&self, k: u64) -> u64 {
        let mut w = [0u8; 8];
        let start = (k as usize).saturating_mul(8);
        for (i, b) in w.iter_mut().enumerate() {
            if let Some(v) = self.input.get(start + i) {
                *b = *v;
            }
        }
        u64::from_le_bytes(w)
    }

    /// Called after the caller completed a pending network OCALL.
    pub fn complete_ocall(&mut self, received: u64) {
        match self.pending.take() {
            Some(NetOp::Recv { .. }) => {
                if let Err(e) = self.push(received) {
                    self.finish(VmStatus::Trapped(e));
                }
            }
            Some(NetOp::Send { .. }) => {}
            None => panic!("no OCALL pending"),
        }
    }

    /// Executes one instruction.
    pub fn step(&mut self, hooks: &mut dyn MemoryHooks) -> VmStep {
        if self.result.is_some() {
            return VmStep::Finished;
        }
        assert!(self.pending.is_none(), "OCALL still pending");
        if self.steps >= self.limits.max_steps {
            return self.finish(VmStatus::Trapped(TrapReason::StepBudget));
        }
        let Some(&instr) = self.image.instrs.get(self.pc) else {
            return self.finish(VmStatus::Trapped(TrapReason::FellOffEnd));
        };
        self.steps += 1;
        let cost = self.costs.cost(&instr);
        self.cycles += cost;
        self.pc += 1;
        match self.exec(instr, hooks) {
            Ok(None) => VmStep::Ran { cost },
            Ok(Some(op)) => {
                self.pending = Some(op);
                VmStep::Ocall { cost, op }
            }
            Err(None) => {
                self.finish(VmStatus::Ok);
                VmStep::Ran { cost }
            }
            Err(Some(trap)) => {
                self.finish(VmStatus::Trapped(trap));
                VmStep::Ran { cost }
            }
        }
    }

    /// `Err(None)` is a clean halt.
    fn exec(
        &mut self,
        instr: Instr,
        hooks: &mut dyn MemoryHooks,
    ) -> Result<Option<NetOp>, Option<TrapReason>> {
        let binop = |vm: &mut Self, f: fn(u64, u64) -> Option<u64>| -> Result<(), TrapReason> {
            let b = vm.pop()?;
            let a = vm.pop()?;
            vm.push(f(a, b).ok_or(TrapReason::DivideByZero)?)
        };
        match instr {
            Instr::Halt => return Err(None),
            Instr::Push(v) => self.push(v)?,
            Instr::Pop => {
                self.pop()?;
            }
            Instr::Dup => {
                let v = self.pop()?;
                self.push(v)?;
                self.push(v)?;
            }
            Instr::Swap => {
                let b = self.pop()?;
                let a = self.pop()?;
                self.push(b)?;
                self.push(a)?;
            }
            Instr::Over => {
                let b = self.pop()?;
                let a = self.pop()?;
                self.push(a)?;
                self.push(b)?;
                self.push(a)?;
            }
            Instr::Get(i) => self.push(self.locals[i as usize])?,
            Instr::Set(i) => self.locals[i as usize] = self.pop()?,
            Instr::Add => binop(self, |a, b| Some(a.wrapping_add(b)))?,
            Instr::Sub => binop(self, |a, b| Some(a.wrapping_sub(b)))?,
            Instr::Mul => binop(self, |a, b| Some(a.wrapping_mul(b)))?,
            Instr::Div => binop(self, |a, b| a.checked_div(b))?,
            Instr::Mod => binop(self, |a, b| a.checked_rem(b))?,
            Instr::Eq => binop(self, |a, b| Some((a == b) as u64))?,
            Instr::Lt => binop(self, |a, b| Some((a < b) as u64))?,
            Instr::Gt => binop(self, |a, b| Some((a > b) as u64))?,
            Instr::Jmp(t) => self.pc = t as usize,
            Instr::Jz(t) => {
                if self.pop()? == 0 {
                    self.pc = t as usize;
                }
            }
            Instr::Jnz(t) => {
                if self.pop()? != 0 {
                    self.pc = t as usize;
                }
            }
            Instr::Alloc => {
                let bytes = self.pop()?;
                if self.live_bytes.saturating_add(bytes) > self.limits.max_memory {
                    return Err(Some(TrapReason::MemoryBudget));
                }
                let t = hooks.read_tick();
                hooks.on_alloc(bytes, t).map_err(TrapReason::Accounting)?;
                self.live_bytes += bytes;
                self.heap.push(Some(Block {
                    words: vec![0; bytes.div_ceil(8) as usize],
                    bytes,
                }));
                self.push(self.heap.len() as u64)?;
            }
            Instr::Realloc => {
                let bytes = self.pop()?;
                let handle = self.pop()?;
                let old = self.block(handle)?.bytes;
                if bytes > old && self.live_bytes.saturating_add(bytes - old) > self.limits.max_memory {
                    return Err(Some(TrapReason::MemoryBudget));
                }
                let t = hooks.read_tick();
                if bytes >= old {
                    hooks.on_alloc(bytes - old, t).map_err(TrapReason::Accounting)?;
                } else {
                    hooks.on_free(old - bytes, t).map_err(TrapReason::Accounting)?;
                }
                self.live_bytes = self.live_bytes - old + bytes;
                let block = self.block(handle)?;
                block.words.resize(bytes.div_ceil(8) as usize, 0);
                block.bytes = bytes;
                self.push(handle)?;
            }
            Instr::Free => {
                let handle = self.pop()?;
                let bytes = self.block(handle)?.bytes;
                let t = hooks.read_tick();
                hooks.on_free(bytes, t).map_err(TrapReason::Accounting)?;
                self.live_bytes -= bytes;
                self.heap[(handle - 1) as usize] = None;
            }
            Instr::Load => {
                let idx = self.pop()?;
                let handle = self.pop()?;
                let v = *self
                    .block(handle)?
                    .words
                    .get(idx as usize)
                    .ok_or(TrapReason::OutOfBounds)?;
                self.push(v)?;
            }
            Instr::Store => {
                let v = self.pop()?;
                let idx = self.pop()?;
                let handle = self.pop()?;
                *self
                    .block(handle)?
                    .words
                    .get_mut(idx as usize)
                    .ok_or(TrapReason::OutOfBounds)? = v;
            }
            Instr::NetSend | Instr::NetRecv => {
                let len = self.pop()?;
                let handle = self.pop()?;
                if len > self.block(handle)?.bytes {
                    return Err(Some(TrapReason::OutOfBounds));
                }
                return Ok(Some(if instr == Instr::NetSend {
                    NetOp::Send { bytes: len }
                } else {
                    NetOp::Recv { bytes: len }
                }));
            }
            Instr::Arg(k) => self.push(self.input_word(k as u64))?,
            Instr::InLen => self.push(self.input.len() as u64)?,
            Instr::Out => {
                let v = self.pop()?;
                if self.output.len() as u64 + 8 > self.limits.max_output {
                    return Err(Some(TrapReason::OutputBudget));
                }
                self.output.extend_from_slice(&v.to_le_bytes());
            }
            Instr::SetTag => {
                let len = self.pop()?;
                let handle = self.pop()?;
                let block = self.block(handle)?;
                if len > block.bytes {
                    return Err(Some(TrapReason::OutOfBounds));
                }
                self.tag = hash(&block_bytes(&block.words, len));
            }
        }
        Ok(None)
    }
}

/// Runs to completion, performing OCALLs through the hooks.
pub fn vm_execute<H: MemoryHooks + NetworkHooks>(
    image: &FunctionImage,
    input: &[u8],
    limits: VmLimits,
    default_tag: Digest,
    hooks: &mut H,
) -> VmResult {
    let mut vm = Vm::new(image, input, limits, default_tag);
    loop {
        match vm.step(hooks) {
            VmStep::Ran { .. } => {}
            VmStep::Ocall { op, .. } => {
                let received = hooks.ocall(op);
                match op {
                    NetOp::Send { bytes } => hooks.on_net(bytes, 0),
                    NetOp::Recv { .. } => hooks.on_net(0, received),
                }
                vm.complete_ocall(received);
            }
            VmStep::Finished => break,
        }
    }
    vm.into_result().expect("finished")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub message: String,
}

fn parse_number(s: &str) -> Option<u64> {
    if let Some(hex) = s.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()
    } else if let Some(neg) = s.strip_prefix('-') {
        neg.parse::<u64>().ok().map(|v| v.wrapping_neg())
    } else {
        s.parse().ok()
    }
}

/// Assembles the text form: one instruction per line, `name:` labels,
/// `;` comments and an optional `.entry label` directive.
pub fn assemble(text: &str) -> Result<Vec<u8>, AsmError> {
    let mut labels: HashMap<String, u32> = HashMap::new();
    let mut lines = Vec::new();
    let mut entry_label: Option<(usize, String)> = None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let mut line = raw.split(';').next().unwrap_or("").trim();
        while let Some((label, rest)) = line.split_once(':') {
            let label = label.trim();
            if label.is_empty() || label.contains(char::is_whitespace) {
                break;
            }
            if labels.insert(label.to_string(), lines.len() as u32).is_some() {
                return Err(AsmError {
                    line: line_no,
                    message: format!("duplicate label {label}"),
                });
            }
            line = rest.trim();
        }
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(".entry") {
            entry_label = Some((line_no, rest.trim().to_string()));
            continue;
        }
        lines.push((line_no, line.to_string()));
    }

    let resolve = |line: usize, s: &str| -> Result<u32, AsmError> {
        labels
            .get(s)
            .copied()
            .or_else(|| parse_number(s).and_then(|v| u32::try_from(v).ok()))
            .ok_or_else(|| AsmError {
                line,
                message: format!("unknown label {s}"),
            })
    };

    let mut instrs = Vec::with_capacity(lines.len());
    for (line, text) in &lines {
        let line = *line;
        let mut parts = text.split_whitespace();
        let mnemonic = parts.next().unwrap().to_ascii_uppercase();
        let operand = parts.next();
        if parts.next().is_some() {
            return Err(AsmError {
                line,
                message: "too many operands".into(),
            });
        }
        let need = |op: Option<&'_ str>| -> Result<String, AsmError> {
            op.map(str::to_string).ok_or_else(|| AsmError {
                line,
                message: format!("{mnemonic} needs an operand"),
            })
        };
        let small = |op: Option<&str>| -> Result<u8, AsmError> {
            let s = need(op)?;
            parse_number(&s)
                .and_then(|v| u8::try_from(v).ok())
                .ok_or_else(|| AsmError {
                    line,
                    message: format!("bad byte operand {s}"),
                })
        };
        let instr = match mnemonic.as_str() {
            "HALT" => Instr::Halt,
            "PUSH" => {
                let s = need(operand)?;
                Instr::Push(parse_number(&s).ok_or_else(|| AsmError {
                    line,
                    message: format!("bad immediate {s}"),
                })?)
            }
            "POP" => Instr::Pop,
            "DUP" => Instr::Dup,
            "SWAP" => Instr::Swap,
            "OVER" => Instr::Over,
            "GET" => Instr::Get(small(operand)?),
            "SET" => Instr::Set(small(operand)?),
            "ADD" => Instr::Add,
            "SUB" => Instr::Sub,
            "MUL" => Instr::Mul,
            "DIV" => Instr::Div,
            "MOD" => Instr::Mod,
            "EQ" => Instr::Eq,
            "LT" => Instr::Lt,
            "GT" => Instr::Gt,
            "JMP" => Instr::Jmp(resolve(line, &need(operand)?)?),
            "JZ" => Instr::Jz(resolve(line, &need(operand)?)?),
            "JNZ" => Instr::Jnz(resolve(line, &need(operand)?)?),
            "ALLOC" => Instr::Alloc,
            "REALLOC" => Instr::Realloc,
            "FREE" => Instr::Free,
            "LOAD" => Instr::Load,
            "STORE" => Instr::Store,
            "NET_SEND" => Instr::NetSend,
            "NET_RECV" => Instr::NetRecv,
            "ARG" => Instr::Arg(small(operand)?),
            "INLEN" => Instr::InLen,
            "OUT" => Instr::Out,
            "SET_TAG" => Instr::SetTag,
            other => {
                return Err(AsmError {
                    line,
                    message: format!("unknown mnemonic {other}"),
                })
            }
        };
        let takes_operand = matches!(
            instr,
            Instr::Push(_) | Instr::Get(_) | Instr::Set(_) | Instr::Arg(_)
        ) || instr.jump_target().is_some();
        if !takes_operand && operand.is_some() {
            return Err(AsmError {
                line,
                message: format!("{mnemonic} takes no operand"),
            });
        }
        instrs.push(instr);
    }
    if instrs.is_empty() {
        return Err(AsmError {
            line: 0,
            message: "no instructions".into(),
        });
    }
    let entry = match entry_label {
        Some((line, label)) => resolve(line, &label)?,
        None => 0,
    };
    let bytes = encode_program(&instrs, entry);
    vm_load(&bytes).map_err(|e| AsmError {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(bytes)
}

/// Built-in functions used by the tests, experiments and CLI.
pub mod corpus {
    use super::{assemble, vm_load, FunctionImage};

    pub const FIB: &str = "\
; values[0..=n] of the Fibonacci sequence in a pre-allocated block; outputs values[n].
.entry start
start:
    ARG 0
    DUP
    JNZ have_n
    POP
    PUSH 1
have_n:
    SET 0           ; n
    GET 0
    PUSH 1
    ADD
    PUSH 8
    MUL
    ALLOC
    SET 1           ; values
    GET 1
    PUSH 0
    PUSH 0
    STORE
    GET 1
    PUSH 1
    PUSH 1
    STORE
    PUSH 2
    SET 2           ; i
loop:
    GET 2
    GET 0
    GT
    JNZ done
    GET 1
    GET 2
    GET 1
    GET 2
    PUSH 1
    SUB
    LOAD
    GET 1
    GET 2
    PUSH 2
    SUB
    LOAD
    ADD
    STORE
    GET 2
    PUSH 1
    ADD
    SET 2
    JMP loop
done:
    GET 1
    GET 0
    LOAD
    OUT
    HALT
";

    pub const KNOWN_NETWORK: &str = "\
; sends ARG 0 bytes, receives ARG 1 bytes, outputs the received count.
    ARG 0
    ARG 1
    ADD
    PUSH 8
    ADD
    ALLOC
    SET 0
    GET 0
    ARG 0
    NET_SEND
    GET 0
    ARG 1
    NET_RECV
    OUT
    GET 0
    FREE
    HALT
";

    pub const EMPTY: &str = "    HALT\n";

    pub const ALLOC_CHURN: &str = "\
; ARG 0 iterations of: allocate ARG 1 bytes, free them, spin ARG 2 rounds.
    ARG 0
    SET 0
outer:
    GET 0
    JZ done
    ARG 1
    ALLOC
    FREE
    ARG 2
    SET 1
spin:
    GET 1
    JZ next
    GET 1
    PUSH 1
    SUB
    SET 1
    JMP spin
next:
    GET 0
    PUSH 1
    SUB
    SET 0
    JMP outer
done:
    HALT
";

    pub fn image(source: &str) -> FunctionImage {
        vm_load(&assemble(source).expect("corpus assembles")).expect("corpus loads")
    }

    pub fn fib() -> FunctionImage {
        image(FIB)
    }

    pub fn known_network() -> FunctionImage {
        image(KNOWN_NETWORK)
    }

    pub fn empty() -> FunctionImage {
        image(EMPTY)
    }

    pub fn alloc_churn() -> FunctionImage {
        image(ALLOC_CHURN)
    }

    /// All built-ins by name.
    pub fn all() -> Vec<(&'static str, FunctionImage)> {
        vec![
            ("fib", fib()),
            ("known_network", known_network()),
            ("empty", empty()),
            ("alloc_churn", alloc_churn()),
        ]
    }

    pub fn by_name(name: &str) -> Option<FunctionImage> {
        all().into_iter().find(|(n, _)| *n == name).map(|(_, i)| i)
    }

    /// Little-endian u64 words.
    pub fn input(words: &[u64]) -> Vec<u8> {
        words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::corpus::{self, input};
    use super::*;
    use proptest::prelude::*;

    #[derive(Default)]
    struct Recorder {
        calls: Vec<String>,
        net: NullHooks,
    }

    impl MemoryHooks for Recorder {
        fn read_tick(&mut self) -> u64 {
            0
        }
        fn on_alloc(&mut self, bytes: u64, _: u64) -> Result<(), String> {
            self.calls.push(format!("alloc {bytes}"));
            Ok(())
        }
        fn on_free(&mut self, bytes: u64, _: u64) -> Result<(), String> {
            self.calls.push(format!("free {bytes}"));
            Ok(())
        }
    }

    impl NetworkHooks for Recorder {
        fn ocall(&mut self, op: NetOp) -> u64 {
            self.calls.push(format!("{op:?}"));
            self.net.ocall(op)
        }
        fn on_net(&mut self, sent: u64, received: u64) {
            self.net.on_net(sent, received)
        }
    }

    fn run(image: &FunctionImage, words: &[u64]) -> (VmResult, Recorder) {
        let mut hooks = Recorder::default();
        let r = vm_execute(image, &input(words), VmLimits::default(), hash(b""), &mut hooks);
        (r, hooks)
    }

    fn fib_ref(n: u64) -> u64 {
        let (mut a, mut b) = (0u64, 1u64);
        for _ in 0..n {
            (a, b) = (b, a.wrapping_add(b));
        }
        a
    }

    #[test]
    fn fib_of_ten_is_55() {
        let (r, hooks) = run(&corpus::fib(), &[10]);
        assert_eq!(r.status, VmStatus::Ok);
        assert_eq!(r.output, 55u64.to_le_bytes());
        assert_eq!(hooks.calls, vec!["alloc 88"]);
    }

    #[test]
    fn fib_zero_is_treated_as_one() {
        let (r, _) = run(&corpus::fib(), &[0]);
        assert_eq!(r.output, 1u64.to_le_bytes());
    }

    #[test]
    fn fib_instruction_count_is_linear() {
        let count = |n: u64| {
            let image = corpus::fib();
            let mut vm = Vm::new(&image, &input(&[n]), VmLimits::default(), hash(b""));
            let mut hooks = NullHooks::default();
            while vm.step(&mut hooks) != VmStep::Finished {}
            vm.instructions_executed()
        };
        let (a, b, c) = (count(100), count(200), count(5000));
        assert_eq!(b - a, (c - b) / 48);
    }

    #[test]
    fn known_network_reports_both_directions() {
        let (r, hooks) = run(&corpus::known_network(), &[1000, 500]);
        assert_eq!(r.output, 500u64.to_le_bytes());
        assert_eq!(hooks.net.net, 1500);
    }

    #[test]
    fn empty_allocates_nothing() {
        let (r, hooks) = run(&corpus::empty(), &[]);
        assert_eq!(r.status, VmStatus::Ok);
        assert!(r.output.is_empty());
        assert!(hooks.calls.is_empty());
    }

    #[test]
    fn load_is_stable_and_rejects_truncation() {
        let bytes = assemble(corpus::FIB).unwrap();
        let a = vm_load(&bytes).unwrap();
        let b = vm_load(&bytes.clone()).unwrap();
        assert_eq!(a.function_hash, b.function_hash);
        assert_eq!(a.function_hash, hash(&bytes));
        let err = vm_load(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.offset, 9);
        let push = encode_program(&[Instr::Push(1)], 0);
        let mut fixed_len = push[..push.len() - 3].to_vec();
        let code_len = (fixed_len.len() - HEADER_LEN) as u32;
        fixed_len[9..13].copy_from_slice(&code_len.to_be_bytes());
        let err = vm_load(&fixed_len).unwrap_err();
        assert_eq!((err.offset, err.reason.as_str()), (HEADER_LEN, "truncated operand"));
        assert!(vm_load(b"MFVX").is_err());
    }

    #[test]
    fn load_rejects_bad_jumps_and_opcodes() {
        let bad_jump = encode_program(&[Instr::Jmp(5), Instr::Halt], 0);
        assert!(vm_load(&bad_jump).unwrap_err().reason.contains("jump target"));
        let mut bad_op = encode_program(&[Instr::Halt], 0);
        bad_op[HEADER_LEN] = 0xee;
        assert_eq!(vm_load(&bad_op).unwrap_err().offset, HEADER_LEN);
    }

    #[test]
    fn traps_surface_reasons() {
        let prog = |src: &str| vm_load(&assemble(src).unwrap()).unwrap();
        let (r, _) = run(&prog("PUSH 1\nPUSH 0\nDIV\nHALT"), &[]);
        assert_eq!(r.status, VmStatus::Trapped(TrapReason::DivideByZero));
        let (r, _) = run(&prog("PUSH 7\nFREE\nHALT"), &[]);
        assert_eq!(r.status, VmStatus::Trapped(TrapReason::InvalidHandle));
        let (r, _) = run(&prog("l: JMP l"), &[]);
        assert_eq!(r.status, VmStatus::Trapped(TrapReason::StepBudget));
        let limits = VmLimits::new(100, 16, 8).unwrap();
        let mut h = NullHooks::default();
        let r = vm_execute(&prog("PUSH 17\nALLOC\nHALT"), &[], limits, hash(b""), &mut h);
        assert_eq!(r.status, VmStatus::Trapped(TrapReason::MemoryBudget));
        let r = vm_execute(&prog("PUSH 1\nOUT\nPUSH 2\nOUT\nHALT"), &[], limits, hash(b""), &mut h);
        assert_eq!(r.status, VmStatus::Trapped(TrapReason::OutputBudget));
        assert!(VmLimits::new(0, 1, 1).is_none());
    }

    #[test]
    fn tag_defaults_and_can_be_set() {
        let (r, _) = run(&corpus::empty(), &[]);
        assert_eq!(r.tag, hash(b""));
        let src = "PUSH 8\nALLOC\nDUP\nPUSH 0\nPUSH 0x6162\nSTORE\nPUSH 2\nSET_TAG\nHALT";
        let (r, _) = run(&vm_load(&assemble(src).unwrap()).unwrap(), &[]);
        assert_eq!(r.tag, hash(b"ba"));
    }

    #[test]
    fn realloc_reports_signed_deltas() {
        let src = "PUSH 10\nALLOC\nPUSH 30\nREALLOC\nPUSH 4\nREALLOC\nFREE\nHALT";
        let (r, hooks) = run(&vm_load(&assemble(src).unwrap()).unwrap(), &[]);
        assert_eq!(r.status, VmStatus::Ok);
        assert_eq!(hooks.calls, vec!["alloc 10", "alloc 20", "free 26", "free 4"]);
    }

    #[test]
    fn assembler_reports_line_numbers() {
        let err = assemble("PUSH 1\nBOGUS\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(assemble("JMP nowhere").is_err());
        assert!(assemble("HALT 3").is_err());
    }

    proptest! {
        #[test]
        fn fib_matches_reference(n in 1u64..300) {
            let (r, _) = run(&corpus::fib(), &[n]);
            prop_assert_eq!(r.output, fib_ref(n).to_le_bytes().to_vec());
        }

        #[test]
        fn execution_is_deterministic_and_cycles_sum(iters in 0u64..20, k in 0u64..500, spin in 0u64..20) {
            let image = corpus::alloc_churn();
            let go = || {
                let mut vm = Vm::new(&image, &input(&[iters, k, spin]), VmLimits::default(), hash(b""));
                let mut hooks = Recorder::default();
                let mut costs = 0;
                loop {
                    match vm.step(&mut hooks) {
                        VmStep::Ran { cost } => costs += cost,
                        VmStep::Ocall { .. } => unreachable!(),
                        VmStep::Finished => break,
                    }
                }
                (vm.cycles_charged(), costs, hooks.calls, vm.into_result())
            };
            let a = go();
            prop_assert_eq!(a.0, a.1);
            prop_assert_eq!(a, go());
        }
    }
}
