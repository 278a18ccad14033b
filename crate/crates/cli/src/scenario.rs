//! Scenario files: `key = value` settings that fully determine a run.

use std::path::{Path, PathBuf};

use mfaas_core::experiments::{parse_schedule, FuzzConfig};
use mfaas_core::metering::TimerConfig;
use mfaas_core::orchestrator::parse_key_values;
use mfaas_core::runtime::{HostInterrupt, NetworkModel, RunConfig, Target};
use mfaas_core::vm::CostTable;
use rand::Rng;

use crate::CliError;

#[derive(Debug, Clone)]
pub enum ScheduleSource {
    None,
    File(PathBuf),
    /// Seeded random worker and timer interrupts.
    Fuzz { seed: u64, interrupts: usize, horizon: u64 },
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub tau: u64,
    pub epsilon: u64,
    pub timers: usize,
    pub schedule: ScheduleSource,
    pub pool_size: usize,
    pub policy: Option<PathBuf>,
    pub function: Option<String>,
    pub input: Option<String>,
    pub network_cycles: u64,
    pub costs: CostTable,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            tau: run.timer.tau,
            epsilon: run.timer.epsilon,
            timers: run.timers,
            schedule: ScheduleSource::None,
            pool_size: 4,
            policy: None,
            function: None,
            input: None,
            network_cycles: run.network.default_cycles,
            costs: run.costs,
            seed: 1,
        }
    }
}

fn num(key: &str, value: &str) -> Result<u64, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("scenario: bad value for {key}: {value}")))
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut c = Self::default();
        let mut fuzz_seed = None;
        let mut fuzz_interrupts = FuzzConfig::default().max_interrupts;
        let mut fuzz_horizon = 12_000;
        let map = parse_key_values(text).map_err(|e| CliError::Usage(format!("scenario: {e}")))?;
        for (k, v) in &map {
            match k.as_str() {
                "tau" => c.tau = num(k, v)?,
                "epsilon" => c.epsilon = num(k, v)?,
                "timers" => c.timers = num(k, v)? as usize,
                "schedule" => c.schedule = ScheduleSource::File(base.join(v)),
                "fuzz_seed" => fuzz_seed = Some(num(k, v)?),
                "fuzz_interrupts" => fuzz_interrupts = num(k, v)? as usize,
                "fuzz_horizon" => fuzz_horizon = num(k, v)?,
                "pool_size" => c.pool_size = num(k, v)? as usize,
                "policy" => c.policy = Some(base.join(v)),
                "function" => c.function = Some(v.clone()),
                "input" => c.input = Some(v.clone()),
                "network_cycles" => c.network_cycles = num(k, v)?,
                "cost_base" => c.costs.base = num(k, v)?,
                "cost_alloc" => c.costs.alloc = num(k, v)?,
                "cost_net" => c.costs.net = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                _ => return Err(CliError::Usage(format!("scenario: unknown key {k}"))),
            }
        }
        if let Some(seed) = fuzz_seed {
            if matches!(c.schedule, ScheduleSource::File(_)) {
                return Err(CliError::Usage(
                    "scenario: schedule and fuzz_seed are mutually exclusive".into(),
                ));
            }
            c.schedule = ScheduleSource::Fuzz {
                seed,
                interrupts: fuzz_interrupts,
                horizon: fuzz_horizon,
            };
        }
        if c.timers == 0 || c.pool_size == 0 {
            return Err(CliError::Usage("scenario: timers and pool_size must be positive".into()));
        }
        Ok(c)
    }

    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let timer = TimerConfig::new(self.tau, self.epsilon)
            .map_err(|e| CliError::Usage(format!("timer: {e}")))?;
        Ok(RunConfig {
            timer,
            timers: self.timers,
            network: NetworkModel::fixed(self.network_cycles),
            costs: self.costs,
            ..RunConfig::default()
        })
    }

    pub fn interrupts(&self) -> Result<Vec<HostInterrupt>, CliError> {
        match &self.schedule {
            ScheduleSource::None => Ok(Vec::new()),
            ScheduleSource::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                parse_schedule(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
            }
            ScheduleSource::Fuzz {
                seed,
                interrupts,
                horizon,
            } => {
                let mut rng = mfaas_core::crypto::seeded_rng(*seed);
                Ok((0..*interrupts)
                    .map(|_| {
                        let target = match rng.gen_range(0..=self.timers) {
                            0 => Target::Worker,
                            i => Target::Timer(i - 1),
                        };
                        let at = rng.gen_range(0..(*horizon).max(1));
                        HostInterrupt::new(target, at, at + rng.gen_range(0..3000))
                    })
                    .collect())
            }
        }
    }
}
