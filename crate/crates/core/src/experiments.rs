//! Reproducible experiments, curve fits and the randomized lower-bound fuzz.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::seeded_rng;
use crate::runtime::{
    run_metered, HostInterrupt, MeteredRun, NetworkModel, RunConfig, RunRequest, RuntimeError,
    Target, NOTE_ALLOC, NOTE_FREE,
};
use crate::sim::{ActorId, EventKind, TraceLevel};
use crate::vm::{corpus, encode_program, vm_load, FunctionImage, Instr};

#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r[i].parse().ok()).collect()
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    FibTiming,
    FibMemory,
    Network,
    TauSweep,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown experiment {0} (expected fib_timing, fib_memory, network or tau_sweep)")]
pub struct UnknownExperiment(pub String);

impl FromStr for ExperimentName {
    type Err = UnknownExperiment;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fib_timing" => Ok(Self::FibTiming),
            "fib_memory" => Ok(Self::FibMemory),
            "network" => Ok(Self::Network),
            "tau_sweep" => Ok(Self::TauSweep),
            other => Err(UnknownExperiment(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentParams {
    pub tau: u64,
    pub epsilon: u64,
    pub ns: Vec<u64>,
    pub taus: Vec<u64>,
    /// Runs per point; each adds seeded background interrupts.
    pub repetitions: usize,
    /// Random worker interrupts per repetition.
    pub noise: usize,
    pub seed: u64,
    pub network_pairs: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            tau: 100,
            epsilon: 0,
            ns: (1..=10).map(|i| i * 500).collect(),
            taus: vec![10, 20, 50, 100, 200, 500, 1000],
            repetitions: 1,
            noise: 0,
            seed: 1,
            network_pairs: 20,
        }
    }
}

fn noise_schedule(rng: &mut ChaCha20Rng, count: usize, horizon: u64) -> Vec<HostInterrupt> {
    (0..count)
        .map(|_| {
            let at = rng.gen_range(0..horizon.max(1));
            HostInterrupt::new(Target::Worker, at, at + rng.gen_range(1..500))
        })
        .collect()
}

fn summary_config(tau: u64, epsilon: u64) -> Result<RunConfig, RuntimeError> {
    let mut c = RunConfig::with_timer(tau, epsilon).map_err(RuntimeError::Accounting)?;
    c.trace_level = TraceLevel::Summary;
    Ok(c)
}

struct Averaged {
    t_max: f64,
    m_int: f64,
    m_max: f64,
    metered: f64,
    oracle: f64,
    byte_cycles: f64,
    instructions: f64,
}

fn averaged_runs(
    image: &FunctionImage,
    input: &[u8],
    config: &RunConfig,
    params: &ExperimentParams,
    rng: &mut ChaCha20Rng,
) -> Result<Averaged, RuntimeError> {
    let reps = params.repetitions.max(1);
    let mut acc = Averaged {
        t_max: 0.0,
        m_int: 0.0,
        m_max: 0.0,
        metered: 0.0,
        oracle: 0.0,
        byte_cycles: 0.0,
        instructions: 0.0,
    };
    let mut horizon = 0;
    for _ in 0..reps {
        let schedule = noise_schedule(rng, params.noise, horizon);
        let run = run_metered(&RunRequest::new(image, input), config, &schedule)?;
        horizon = run.trace.end.get();
        acc.t_max += run.t_max as f64;
        acc.m_int += run.m_int as f64;
        acc.m_max += run.m_max as f64;
        acc.metered += (run.t_max * run.tau) as f64;
        acc.oracle += run.true_resident_cycles() as f64;
        acc.byte_cycles += byte_cycle_integral(&run) as f64;
        acc.instructions += run.vm_instructions as f64;
    }
    let r = reps as f64;
    Ok(Averaged {
        t_max: acc.t_max / r,
        m_int: acc.m_int / r,
        m_max: acc.m_max / r,
        metered: acc.metered / r,
        oracle: acc.oracle / r,
        byte_cycles: acc.byte_cycles / r,
        instructions: acc.instructions / r,
    })
}

/// Live bytes integrated over the worker's resident cycles inside the armed
/// window, from the allocator notes.
pub fn byte_cycle_integral(run: &MeteredRun) -> u128 {
    let Some((on, off)) = run.meter_window() else {
        return 0;
    };
    let mut steps: Vec<(u64, u128)> = Vec::new();
    let mut live: i128 = 0;
    for e in run.trace.events_of(run.worker) {
        let delta = match e.kind {
            EventKind::Note(NOTE_ALLOC, b) => b as i128,
            EventKind::Note(NOTE_FREE, b) => -(b as i128),
            _ => continue,
        };
        live += delta;
        steps.push((e.cycle.get(), live as u128));
    }
    let live_at = |c: u64| -> u128 {
        match steps.partition_point(|&(at, _)| at <= c) {
            0 => 0,
            i => steps[i - 1].1,
        }
    };
    let mut total = 0;
    for (s, e) in run.trace.resident_intervals(run.worker) {
        let (s, e) = (s.max(on).get(), e.min(off).get());
        if e <= s {
            continue;
        }
        let mut cursor = s;
        let first = steps.partition_point(|&(at, _)| at <= s);
        for &(at, _) in steps[first..].iter().take_while(|&&(at, _)| at < e) {
            total += live_at(cursor) * (at - cursor) as u128;
            cursor = at;
        }
        total += live_at(cursor) * (e - cursor) as u128;
    }
    total
}

pub fn run_experiment(name: ExperimentName, params: &ExperimentParams) -> Result<Csv, RuntimeError> {
    let mut rng = seeded_rng(params.seed);
    match name {
        ExperimentName::FibTiming => {
            let config = summary_config(params.tau, params.epsilon)?;
            let image = corpus::fib();
            let mut csv = Csv::new(&[
                "n",
                "tau",
                "epsilon",
                "t_max",
                "metered_cycles",
                "oracle_cycles",
                "vm_instructions",
            ]);
            for &n in &params.ns {
                let a = averaged_runs(&image, &corpus::input(&[n]), &config, params, &mut rng)?;
                csv.push(vec![
                    n.to_string(),
                    params.tau.to_string(),
                    params.epsilon.to_string(),
                    fmt_f(a.t_max),
                    fmt_f(a.metered),
                    fmt_f(a.oracle),
                    fmt_f(a.instructions),
                ]);
            }
            Ok(csv)
        }
        ExperimentName::FibMemory => {
            let config = summary_config(params.tau, params.epsilon)?;
            let image = corpus::fib();
            let mut csv = Csv::new(&[
                "n",
                "tau",
                "m_int",
                "m_max",
                "t_max",
                "m_int_per_tick",
                "oracle_byte_cycles",
            ]);
            for &n in &params.ns {
                let a = averaged_runs(&image, &corpus::input(&[n]), &config, params, &mut rng)?;
                let per_tick = if a.t_max > 0.0 { a.m_int / a.t_max } else { 0.0 };
                csv.push(vec![
                    n.to_string(),
                    params.tau.to_string(),
                    fmt_f(a.m_int),
                    fmt_f(a.m_max),
                    fmt_f(a.t_max),
                    fmt_f(per_tick),
                    fmt_f(a.byte_cycles),
                ]);
            }
            Ok(csv)
        }
        ExperimentName::Network => {
            let config = summary_config(params.tau, params.epsilon)?;
            let image = corpus::known_network();
            let mut csv = Csv::new(&["sent", "received", "net", "expected", "error"]);
            for _ in 0..params.network_pairs {
                let s = rng.gen_range(0..100_000u64);
                let r = rng.gen_range(0..100_000u64);
                let run = run_metered(
                    &RunRequest::new(&image, &corpus::input(&[s, r])),
                    &config,
                    &[],
                )?;
                csv.push(vec![
                    s.to_string(),
                    r.to_string(),
                    run.net.to_string(),
                    (s + r).to_string(),
                    (run.net as i128 - (s + r) as i128).to_string(),
                ]);
            }
            Ok(csv)
        }
        ExperimentName::TauSweep => {
            let image = corpus::fib();
            let n = params.ns.last().copied().unwrap_or(2000);
            let input = corpus::input(&[n]);
            let mut csv = Csv::new(&[
                "tau",
                "epsilon",
                "epsilon_over_tau",
                "t_max",
                "metered_cycles",
                "oracle_cycles",
                "under_report",
            ]);
            for &tau in &params.taus {
                let config = summary_config(tau, params.epsilon)?;
                let a = averaged_runs(&image, &input, &config, params, &mut rng)?;
                let under = if a.oracle > 0.0 { 1.0 - a.metered / a.oracle } else { 0.0 };
                csv.push(vec![
                    tau.to_string(),
                    params.epsilon.to_string(),
                    fmt_f(params.epsilon as f64 / tau as f64),
                    fmt_f(a.t_max),
                    fmt_f(a.metered),
                    fmt_f(a.oracle),
                    fmt_f(under),
                ]);
            }
            Ok(csv)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    /// Coefficients from the constant term upward.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
}

/// Least-squares polynomial fit of the given degree.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Option<Fit> {
    if xs.len() != ys.len() || xs.len() <= degree {
        return None;
    }
    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, j| (xs[i] / scale).powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let sol = a.clone().svd(true, true).solve(&b, 1e-12).ok()?;
    let pred = &a * &sol;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = ys.iter().zip(pred.iter()).map(|(y, p)| (y - p).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(Fit {
        coefficients: sol.iter().enumerate().map(|(j, c)| c / scale.powi(j as i32)).collect(),
        r_squared,
    })
}

/// Knobs for random program and schedule generation.
#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub max_blocks: usize,
    pub max_spin: u64,
    pub max_alloc: u64,
    pub max_interrupts: usize,
    pub max_interrupt_len: u64,
    pub max_tau: u64,
    pub max_epsilon: u64,
    pub max_timers: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            max_blocks: 10,
            max_spin: 300,
            max_alloc: 4096,
            max_interrupts: 8,
            max_interrupt_len: 3000,
            max_tau: 500,
            max_epsilon: 60,
            max_timers: 2,
        }
    }
}

const SLOTS: u8 = 4;

/// A straight-line program of spin loops, heap operations and network calls.
pub fn random_program(rng: &mut impl Rng, config: &FuzzConfig) -> Vec<Instr> {
    let mut code = Vec::new();
    let mut sizes = [0u64; SLOTS as usize + 1];
    for _ in 0..rng.gen_range(1..=config.max_blocks.max(1)) {
        let slot = rng.gen_range(1..=SLOTS);
        let live = sizes[slot as usize];
        match rng.gen_range(0..5) {
            0 if live == 0 => {
                let bytes = rng.gen_range(1..=config.max_alloc.max(1));
                code.extend([Instr::Push(bytes), Instr::Alloc, Instr::Set(slot)]);
                sizes[slot as usize] = bytes;
            }
            1 if live > 0 => {
                code.extend([Instr::Get(slot), Instr::Free]);
                sizes[slot as usize] = 0;
            }
            2 if live > 0 => {
                let bytes = rng.gen_range(1..=config.max_alloc.max(1));
                code.extend([Instr::Get(slot), Instr::Push(bytes), Instr::Realloc, Instr::Set(slot)]);
                sizes[slot as usize] = bytes;
            }
            3 if live > 0 => {
                let len = rng.gen_range(0..=live);
                code.extend([Instr::Get(slot), Instr::Push(len)]);
                if rng.gen_bool(0.5) {
                    code.push(Instr::NetSend);
                } else {
                    code.extend([Instr::NetRecv, Instr::Pop]);
                }
            }
            _ => {
                let start = code.len() as u32;
                let end = start + 9;
                code.extend([
                    Instr::Push(rng.gen_range(0..=config.max_spin)),
                    Instr::Set(0),
                    Instr::Get(0),
                    Instr::Jz(end),
                    Instr::Get(0),
                    Instr::Push(1),
                    Instr::Sub,
                    Instr::Set(0),
                    Instr::Jmp(start + 2),
                ]);
            }
        }
    }
    code.push(Instr::Halt);
    code
}

/// A program paired with an adversarial host schedule.
#[derive(Debug, Clone)]
pub struct FuzzCase {
    pub program: Vec<Instr>,
    pub config: RunConfig,
    pub schedule: Vec<HostInterrupt>,
}

pub fn random_case(rng: &mut impl Rng, fuzz: &FuzzConfig) -> FuzzCase {
    let program = random_program(rng, fuzz);
    let tau = rng.gen_range(1..=fuzz.max_tau.max(1));
    let epsilon = rng.gen_range(0..=fuzz.max_epsilon);
    let mut config = RunConfig::with_timer(tau, epsilon).expect("tau is positive");
    config.timers = rng.gen_range(1..=fuzz.max_timers.max(1));
    config.trace_level = TraceLevel::Summary;
    config.network = NetworkModel::fixed(rng.gen_range(0..1500));
    config.setup_cycles = rng.gen_range(0..400);
    config.timer_start = rng.gen_range(0..300);
    config.worker_start = rng.gen_range(0..300);
    config.include_load = rng.gen_bool(0.5);
    let horizon = 12_000;
    let schedule = if rng.gen_ratio(1, 20) {
        starvation_schedule(Target::Worker, tau, horizon)
    } else {
        (0..rng.gen_range(0..=fuzz.max_interrupts))
            .map(|_| {
                let target = match rng.gen_range(0..=config.timers) {
                    0 => Target::Worker,
                    i => Target::Timer(i - 1),
                };
                let at = rng.gen_range(0..horizon);
                HostInterrupt::new(target, at, at + rng.gen_range(0..=fuzz.max_interrupt_len))
            })
            .collect()
    };
    FuzzCase {
        program,
        config,
        schedule,
    }
}

/// Interrupts `target` every τ−1 cycles with immediate resumption.
pub fn starvation_schedule(target: Target, tau: u64, horizon: u64) -> Vec<HostInterrupt> {
    let period = tau.saturating_sub(1).max(1);
    (1..=horizon / period)
        .map(|k| HostInterrupt::new(target, k * period, k * period))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseResult {
    pub metered: u128,
    pub oracle: u64,
}

impl CaseResult {
    pub fn holds(&self) -> bool {
        self.metered <= self.oracle as u128
    }
}

pub fn check_case(case: &FuzzCase) -> Result<CaseResult, RuntimeError> {
    let bytes = encode_program(&case.program, 0);
    let image = vm_load(&bytes).expect("generated programs are valid");
    let run = run_metered(&RunRequest::new(&image, &[]), &case.config, &case.schedule)?;
    Ok(CaseResult {
        metered: run.t_max as u128 * run.tau as u128,
        oracle: run.true_resident_cycles(),
    })
}

#[derive(Debug, Clone)]
pub struct FuzzFailure {
    pub index: usize,
    pub case: FuzzCase,
    pub result: Result<CaseResult, RuntimeError>,
}

#[derive(Debug, Clone, Default)]
pub struct FuzzSummary {
    pub cases: usize,
    pub failures: Vec<FuzzFailure>,
}

impl FuzzSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Lower-bound property over `cases` random (program, schedule) pairs.
/// Simulation errors count as failures.
pub fn fuzz_lower_bound(cases: usize, seed: u64, fuzz: &FuzzConfig) -> FuzzSummary {
    let mut rng = seeded_rng(seed);
    let mut summary = FuzzSummary {
        cases,
        failures: Vec::new(),
    };
    for index in 0..cases {
        let case = random_case(&mut rng, fuzz);
        let result = check_case(&case);
        if !matches!(&result, Ok(r) if r.holds()) {
            summary.failures.push(FuzzFailure {
                index,
                case,
                result,
            });
        }
    }
    summary
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schedule line {line}: {message}")]
pub struct ScheduleParseError {
    pub line: usize,
    pub message: String,
}

fn target_name(t: Target) -> String {
    match t {
        Target::Worker => "worker".into(),
        Target::Timer(i) => format!("timer{i}"),
    }
}

/// One `actor,interrupt_cycle,resume_cycle` triple per line.
pub fn render_schedule(schedule: &[HostInterrupt]) -> String {
    let mut out = String::new();
    for e in schedule {
        let _ = writeln!(out, "{},{},{}", target_name(e.target), e.interrupt, e.resume);
    }
    out
}

pub fn parse_schedule(text: &str) -> Result<Vec<HostInterrupt>, ScheduleParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ScheduleParseError {
            line: i + 1,
            message,
        };
        let fields: Vec<_> = line.split(',').map(str::trim).collect();
        let [actor, at, resume] = fields[..] else {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        };
        let target = match actor {
            "worker" => Target::Worker,
            t => match t.strip_prefix("timer").map(str::parse::<usize>) {
                Some(Ok(k)) => Target::Timer(k),
                _ => return Err(err(format!("unknown actor {t}"))),
            },
        };
        let at: u64 = at.parse().map_err(|_| err(format!("bad cycle {at}")))?;
        let resume: u64 = resume.parse().map_err(|_| err(format!("bad cycle {resume}")))?;
        if resume < at {
            return Err(err("resume precedes interrupt".into()));
        }
        out.push(HostInterrupt::new(target, at, resume));
    }
    Ok(out)
}

/// Fuzz case as a self-contained text artifact: header comments plus the schedule.
pub fn render_case(case: &FuzzCase) -> String {
    let mut out = String::new();
    let c = &case.config;
    let _ = writeln!(
        out,
        "# tau={} epsilon={} timers={} network={} setup={} timer_start={} worker_start={} include_load={}",
        c.timer.tau,
        c.timer.epsilon,
        c.timers,
        c.network.default_cycles,
        c.setup_cycles,
        c.timer_start,
        c.worker_start,
        c.include_load
    );
    let _ = writeln!(out, "# program={}", hex::encode(encode_program(&case.program, 0)));
    out.push_str(&render_schedule(&case.schedule));
    out
}

/// Inverse of [`render_case`].
pub fn parse_case(text: &str) -> Result<FuzzCase, ScheduleParseError> {
    let mut config = RunConfig::default();
    config.trace_level = TraceLevel::Summary;
    let mut program = None;
    let (mut tau, mut epsilon) = (config.timer.tau, config.timer.epsilon);
    for (i, line) in text.lines().enumerate() {
        let Some(header) = line.trim().strip_prefix('#') else {
            continue;
        };
        let err = |message: String| ScheduleParseError {
            line: i + 1,
            message,
        };
        for field in header.split_whitespace() {
            let Some((k, v)) = field.split_once('=') else {
                continue;
            };
            let num = || v.parse::<u64>().map_err(|_| err(format!("bad value for {k}")));
            match k {
                "tau" => tau = num()?,
                "epsilon" => epsilon = num()?,
                "timers" => config.timers = num()? as usize,
                "network" => config.network = NetworkModel::fixed(num()?),
                "setup" => config.setup_cycles = num()?,
                "timer_start" => config.timer_start = num()?,
                "worker_start" => config.worker_start = num()?,
                "include_load" => config.include_load = v == "true",
                "program" => {
                    let bytes = hex::decode(v).map_err(|e| err(e.to_string()))?;
                    let image = vm_load(&bytes).map_err(|e| err(e.to_string()))?;
                    program = Some(image.instructions().to_vec());
                }
                _ => {}
            }
        }
    }
    config.timer = crate::metering::TimerConfig::new(tau, epsilon).map_err(|e| ScheduleParseError {
        line: 1,
        message: e.to_string(),
    })?;
    Ok(FuzzCase {
        program: program.ok_or(ScheduleParseError {
            line: 1,
            message: "missing program header".into(),
        })?,
        config,
        schedule: parse_schedule(text)?,
    })
}

/// Actor id a target maps to under a config.
pub fn target_actor(config: &RunConfig, target: Target) -> ActorId {
    match target {
        Target::Worker => config.worker_actor(),
        Target::Timer(i) => config.timer_actor(i),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyfit_recovers_exact_polynomials() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 500.0).collect();
        let line: Vec<f64> = xs.iter().map(|x| 3.0 * x + 7.0).collect();
        let f = polyfit(&xs, &line, 1).unwrap();
        assert!((f.coefficients[1] - 3.0).abs() < 1e-9 && (f.r_squared - 1.0).abs() < 1e-12);
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x - x + 2.0).collect();
        let f = polyfit(&xs, &quad, 2).unwrap();
        assert!((f.coefficients[2] - 0.5).abs() < 1e-9);
        assert!(polyfit(&xs[..1], &line[..1], 1).is_none());
    }

    #[test]
    fn schedule_round_trips() {
        let s = vec![
            HostInterrupt::new(Target::Worker, 5, 9),
            HostInterrupt::new(Target::Timer(1), 7, 7),
        ];
        assert_eq!(parse_schedule(&render_schedule(&s)).unwrap(), s);
        assert_eq!(parse_schedule("worker,1").unwrap_err().line, 1);
        assert!(parse_schedule("# c\nhost,1,2").is_err());
        assert!(parse_schedule("worker,9,2").is_err());
    }

    #[test]
    fn fuzz_case_artifact_round_trips() {
        let mut rng = seeded_rng(4);
        let case = random_case(&mut rng, &FuzzConfig::default());
        let back = parse_case(&render_case(&case)).unwrap();
        assert_eq!(back.program, case.program);
        assert_eq!(back.schedule, case.schedule);
        assert_eq!(back.config.timer, case.config.timer);
        assert_eq!(check_case(&back).unwrap(), check_case(&case).unwrap());
    }

    #[test]
    fn experiments_are_deterministic() {
        let p = ExperimentParams {
            ns: vec![100, 200, 300],
            repetitions: 2,
            noise: 2,
            ..Default::default()
        };
        for name in ["fib_timing", "fib_memory", "network", "tau_sweep"] {
            let e: ExperimentName = name.parse().unwrap();
            assert_eq!(run_experiment(e, &p).unwrap(), run_experiment(e, &p).unwrap());
        }
        assert!("bogus".parse::<ExperimentName>().is_err());
    }

    #[test]
    fn generated_programs_run_to_completion() {
        let mut rng = seeded_rng(9);
        for _ in 0..50 {
            let case = random_case(&mut rng, &FuzzConfig::default());
            assert!(check_case(&case).unwrap().holds());
        }
    }

    #[test]
    fn starvation_yields_zero_ticks() {
        let image = corpus::fib();
        let config = RunConfig::with_timer(50, 0).unwrap();
        let run = run_metered(
            &RunRequest::new(&image, &corpus::input(&[200])),
            &config,
            &starvation_schedule(Target::Worker, 50, 40_000),
        )
        .unwrap();
        assert_eq!(run.t_max, 0);
        assert!(run.true_resident_cycles() > 0);
    }
}
