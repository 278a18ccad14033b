mod deploy;
mod scenario;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfaas_core::attestation::verify_transitive;
use mfaas_core::crypto::{hash, seeded_rng, AgreementKeyPair, Digest};
use mfaas_core::experiments::{
    check_case, fuzz_lower_bound, parse_case, polyfit, render_case, run_experiment,
    ExperimentName, ExperimentParams, FuzzCase, FuzzConfig,
};
use mfaas_core::kde::PublishedKeys;
use mfaas_core::metering::{tag_for_token, SignedMeasurement};
use mfaas_core::orchestrator::{
    client_prepare, client_verify_response, compute_invoice, provider_verify_measurement,
    BillingPolicy, ClientContext, InvokeOptions, MeasurementLog, PoolConfig,
};
use mfaas_core::vm::{assemble, corpus, vm_load, MAGIC};
use mfaas_core::worker::{InvocationResult, Receipt};

use deploy::{decode_hex, encode_hex, read_text, write_text, PublicView, State};
use scenario::{ScenarioConfig, ScheduleSource};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable input. Exit code 2.
    Usage(String),
    /// A verification step rejected its input. Exit code 1.
    Rejected(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Rejected(_) => 1,
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "mfaas", version, about = "Metered function-as-a-service simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a deployment directory: attestation root, KDE and published keys.
    Init {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Rotate the KDE key set and publish the new keys.
    Rotate {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Assemble VM source text into a bytecode image.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Invoke a function through the full client protocol.
    Run(RunArgs),
    /// Verify a signed artifact.
    Verify {
        #[command(subcommand)]
        kind: VerifyKind,
    },
    /// Verify measurement logs and settle an invoice.
    Bill {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Tokens the provider issued, comma separated.
        #[arg(long, value_delimiter = ',')]
        tags: Vec<String>,
        /// Also accept invocations made without a token.
        #[arg(long)]
        untagged: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Randomized lower-bound check over generated programs and schedules.
    Fuzz {
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Where reproducing case files are written on failure.
        #[arg(long, default_value = ".")]
        artifact_dir: PathBuf,
    },
    /// Replay a schedule (or a fuzz failure artifact) and check the lower bound.
    Replay(ReplayArgs),
    /// Reproduce an accuracy experiment as CSV.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct FunctionArgs {
    /// Built-in function: fib, known_network, empty, alloc_churn.
    #[arg(long, conflicts_with = "function")]
    builtin: Option<String>,
    /// Bytecode image or assembly source.
    #[arg(long)]
    function: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dir: PathBuf,
    #[command(flatten)]
    function: FunctionArgs,
    /// Input as comma-separated 64-bit words.
    #[arg(long, conflicts_with = "input_file")]
    input: Option<String>,
    /// Raw input bytes.
    #[arg(long)]
    input_file: Option<PathBuf>,
    #[arg(long)]
    receipt: bool,
    /// Ask for the signed measurement in the response.
    #[arg(long)]
    measurement: bool,
    #[arg(long)]
    token: Option<String>,
    /// Scenario file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<u64>,
    #[arg(long)]
    epsilon: Option<u64>,
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    client_seed: u64,
    /// Append the provider's measurement to this log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write PREFIX.input.bin, .output.bin, .receipt.hex and .measurement.hex.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VerifyKind {
    /// Transitive attestation of published key sets.
    Quote {
        #[arg(long)]
        dir: PathBuf,
        /// Key set files; defaults to every keys-*.hex in the directory.
        files: Vec<PathBuf>,
    },
    /// Signed measurements, one hex line each.
    Measurement {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tags: Vec<String>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// A receipt against the input, function and output it claims.
    Receipt {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        receipt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "error")]
        output: Option<PathBuf>,
        /// Error message returned in place of an output.
        #[arg(long)]
        error: Option<String>,
        #[command(flatten)]
        function: FunctionArgs,
    },
}

#[derive(Args)]
struct ReplayArgs {
    /// Schedule file; a fuzz artifact also carries program and timer settings.
    schedule: PathBuf,
    #[command(flatten)]
    function: FunctionArgs,
    #[arg(long, default_value = "")]
    input: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<u64>,
    #[arg(long)]
    epsilon: Option<u64>,
    #[arg(long)]
    timers: Option<usize>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// fib_timing, fib_memory, network or tau_sweep.
    name: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    tau: u64,
    #[arg(long, default_value_t = 0)]
    epsilon: u64,
    /// Sweep of n as START:END:STEP or a comma list.
    #[arg(long, default_value = "500:5000:500")]
    ns: String,
    #[arg(long, value_delimiter = ',', default_value = "10,20,50,100,200,500,1000")]
    taus: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// Random worker interrupts added per repetition.
    #[arg(long, default_value_t = 0)]
    noise: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init { dir, seed } => cmd_init(&dir, seed),
        Command::Rotate { dir, seed } => cmd_rotate(&dir, seed),
        Command::Asm { input, output } => cmd_asm(&input, &output),
        Command::Run(args) => cmd_run(args),
        Command::Verify { kind } => cmd_verify(kind),
        Command::Bill {
            dir,
            policy,
            tags,
            untagged,
            out,
            logs,
        } => cmd_bill(&dir, &policy, &tags, untagged, out.as_deref(), &logs),
        Command::Fuzz {
            cases,
            seed,
            artifact_dir,
        } => cmd_fuzz(cases, seed, &artifact_dir),
        Command::Replay(args) => cmd_replay(args),
        Command::Experiment(args) => cmd_experiment(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Rejected(m) => println!("REJECTED: {m}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn cmd_init(dir: &Path, seed: u64) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let state = State {
        seed,
        rotations: Vec::new(),
    };
    state.save(dir)?;
    for path in deploy::publish(dir, &state.deployment(PoolConfig::default()))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_rotate(dir: &Path, seed: u64) -> CliResult {
    let mut state = State::load(dir)?;
    state.rotations.push(seed);
    state.save(dir)?;
    let d = state.deployment(PoolConfig::default());
    deploy::publish(dir, &d)?;
    let p = d.kde.published();
    println!("rotated to epoch {} key set {}", d.kde.epoch(), p.keyset_id());
    Ok(())
}

fn cmd_asm(input: &Path, output: &Path) -> CliResult {
    let bytes = assemble(&read_text(input)?)
        .map_err(|e| CliError::Usage(format!("{}:{}: {}", input.display(), e.line, e.message)))?;
    std::fs::write(output, &bytes).map_err(|e| CliError::Usage(format!("{}: {e}", output.display())))?;
    let image = vm_load(&bytes).map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "{} instructions, {} bytes, function hash {}",
        image.instructions().len(),
        bytes.len(),
        image.function_hash
    );
    Ok(())
}

/// Bytecode of the selected function.
fn function_bytes(f: &FunctionArgs) -> Result<Vec<u8>, CliError> {
    function_bytes_or(f, None)
}

fn function_bytes_or(f: &FunctionArgs, fallback: Option<&str>) -> Result<Vec<u8>, CliError> {
    if let Some(path) = &f.function {
        let raw = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if raw.starts_with(MAGIC) {
            return Ok(raw);
        }
        let text = String::from_utf8(raw)
            .map_err(|_| CliError::Usage(format!("{}: neither bytecode nor text", path.display())))?;
        return assemble(&text)
            .map_err(|e| CliError::Usage(format!("{}:{}: {}", path.display(), e.line, e.message)));
    }
    let name = f
        .builtin
        .as_deref()
        .or(fallback)
        .ok_or_else(|| CliError::Usage("one of --builtin or --function is required".into()))?;
    let source = match name {
        "fib" => corpus::FIB,
        "known_network" => corpus::KNOWN_NETWORK,
        "empty" => corpus::EMPTY,
        "alloc_churn" => corpus::ALLOC_CHURN,
        other => return Err(CliError::Usage(format!("unknown builtin {other}"))),
    };
    Ok(assemble(source).expect("corpus assembles"))
}

fn parse_words(text: &str) -> Result<Vec<u8>, CliError> {
    let words = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| CliError::Usage(format!("bad input word {s}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(corpus::input(&words))
}

fn scenario(path: Option<&Path>, tau: Option<u64>, epsilon: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut s = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(t) = tau {
        s.tau = t;
    }
    if let Some(e) = epsilon {
        s.epsilon = e;
    }
    Ok(s)
}

fn describe_output(bytes: &[u8]) -> String {
    if bytes.len() % 8 == 0 && !bytes.is_empty() {
        let words: Vec<String> = bytes
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")).to_string())
            .collect();
        format!("{} (hex {})", words.join(","), hex::encode(bytes))
    } else {
        format!("hex {}", hex::encode(bytes))
    }
}

fn cmd_run(args: RunArgs) -> CliResult {
    let mut sc = scenario(args.config.as_deref(), args.tau, args.epsilon)?;
    if let Some(path) = &args.schedule {
        sc.schedule = ScheduleSource::File(path.clone());
    }
    let code = function_bytes_or(&args.function, sc.function.as_deref())?;
    let input = match (&args.input_file, &args.input, &sc.input) {
        (Some(p), _, _) => std::fs::read(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        (None, Some(words), _) | (None, None, Some(words)) => parse_words(words)?,
        (None, None, None) => Vec::new(),
    };
    let interrupts = sc.interrupts()?;
    let view = PublicView::load(&args.dir)?;
    let published: PublishedKeys = view
        .latest()
        .cloned()
        .ok_or_else(|| CliError::Usage("no published key sets".into()))?;
    let ctx = ClientContext::new(
        &view.root,
        published,
        &view.kde,
        &view.worker,
        AgreementKeyPair::from_seed(args.client_seed),
    )
    .map_err(|e| CliError::Rejected(format!("attestation: {e}")))?;

    let pool = PoolConfig {
        max_workers: sc.pool_size,
        run: sc.run_config()?,
        ..PoolConfig::default()
    };
    let mut d = State::load(&args.dir)?.deployment(pool);
    let options = InvokeOptions {
        receipt: args.receipt,
        want_measurement: args.measurement,
        token: args.token.as_ref().map(|t| t.as_bytes().to_vec()),
    };
    let mut rng = seeded_rng(sc.seed ^ args.client_seed.rotate_left(32));
    let (request, pending) = client_prepare(&ctx, hash(&code), &input, &options, &mut rng);
    let dispatched = d
        .invoke(&code, &request, &interrupts)
        .map_err(|e| CliError::Rejected(format!("dispatch: {e}")))?;
    let m = dispatched.measurement;
    println!(
        "measurement: t_max={} tau={} m_int={} m_max={} net={} tag={}",
        m.t_max, m.tau, m.m_int, m.m_max, m.net, m.tag
    );
    if let Some(path) = &args.log {
        MeasurementLog::open(path)
            .and_then(|mut log| log.append(&m))
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(prefix) = &args.save {
        let with = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
        std::fs::write(with("input.bin"), &input).map_err(|e| CliError::Usage(e.to_string()))?;
        write_text(&with("measurement.hex"), &encode_hex(&m))?;
    }
    let outcome = client_verify_response(&pending, &dispatched.response)
        .map_err(|e| CliError::Rejected(format!("client: {e}")))?;
    println!("output: {}", describe_output(&outcome.output));
    if let Some(r) = &outcome.receipt {
        println!("receipt: verified, key set {}", r.keyset_id);
    }
    if let Some(prefix) = &args.save {
        let with = |ext: &str| PathBuf::from(format!("{}.{ext}", prefix.display()));
        std::fs::write(with("output.bin"), &outcome.output).map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(r) = &outcome.receipt {
            write_text(&with("receipt.hex"), &encode_hex(r))?;
        }
    }
    Ok(())
}

fn cmd_verify(kind: VerifyKind) -> CliResult {
    match kind {
        VerifyKind::Quote { dir, files } => {
            let view = PublicView::load(&dir)?;
            let sets: Vec<PublishedKeys> = if files.is_empty() {
                view.published.clone()
            } else {
                files.iter().map(|f| decode_hex(f)).collect::<Result<_, _>>()?
            };
            if sets.is_empty() {
                return Err(CliError::Usage("no key sets to verify".into()));
            }
            for p in &sets {
                let t = verify_transitive(&view.root, &p.quote, &view.kde, &p.keys, &view.worker)
                    .map_err(|e| CliError::Rejected(format!("key set {}: {e}", p.keyset_id())))?;
                println!("ACCEPTED key set {} epoch {} worker {}", p.keyset_id(), t.epoch, t.worker);
            }
            Ok(())
        }
        VerifyKind::Measurement { dir, tags, files } => {
            let ring = PublicView::load(&dir)?.keyring()?;
            let mut reports = Vec::new();
            for f in &files {
                reports.extend(read_reports(f)?);
            }
            let mut rejected = 0;
            for m in &reports {
                let verdict = match ring.res_key(&m.keyset_id) {
                    None => Err("unknown key set".to_string()),
                    Some(k) if !m.verify(k) => Err("signature does not verify".to_string()),
                    Some(_) if !tags.is_empty() && !tag_set(&tags, false).contains(&m.tag) => {
                        Err("spurious invocation tag".to_string())
                    }
                    Some(_) => Ok(()),
                };
                match verdict {
                    Ok(()) => {
                        let epoch = ring.epoch(&m.keyset_id).unwrap_or_default();
                        let note = if ring.is_retired(&m.keyset_id) {
                            format!(" (signed by retired key set, epoch {epoch})")
                        } else {
                            format!(" (epoch {epoch})")
                        };
                        println!(
                            "ACCEPTED {} t_max={} tau={} m_int={} m_max={} net={}{note}",
                            m.digest(),
                            m.t_max,
                            m.tau,
                            m.m_int,
                            m.m_max,
                            m.net
                        );
                    }
                    Err(reason) => {
                        rejected += 1;
                        println!("REJECTED {}: {reason}", m.digest());
                    }
                }
            }
            if rejected > 0 {
                return Err(CliError::Rejected(format!("{rejected} of {} measurements", reports.len())));
            }
            Ok(())
        }
        VerifyKind::Receipt {
            dir,
            receipt,
            input,
            output,
            error,
            function,
        } => {
            let ring = PublicView::load(&dir)?.keyring()?;
            let receipt: Receipt = decode_hex(&receipt)?;
            let input = std::fs::read(&input).map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?;
            let result = match (output, error) {
                (Some(p), None) => InvocationResult::Output(
                    std::fs::read(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
                ),
                (None, Some(msg)) => InvocationResult::Error(msg),
                _ => return Err(CliError::Usage("one of --output or --error is required".into())),
            };
            let function_hash = hash(&function_bytes(&function)?);
            let key = ring
                .out_key(&receipt.keyset_id)
                .ok_or_else(|| CliError::Rejected("receipt names an unknown key set".into()))?;
            receipt
                .verify_for(key, &input, &function_hash, &result)
                .map_err(|e| CliError::Rejected(format!("receipt: {e}")))?;
            println!("ACCEPTED receipt for function {function_hash}");
            Ok(())
        }
    }
}

fn tag_set(tokens: &[String], untagged: bool) -> HashSet<Digest> {
    let mut set: HashSet<Digest> = tokens.iter().map(|t| tag_for_token(Some(t.as_bytes()))).collect();
    if untagged {
        set.insert(tag_for_token(None));
    }
    set
}

fn read_reports(path: &Path) -> Result<Vec<SignedMeasurement>, CliError> {
    MeasurementLog::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_bill(
    dir: &Path,
    policy: &Path,
    tags: &[String],
    untagged: bool,
    out: Option<&Path>,
    logs: &[PathBuf],
) -> CliResult {
    let policy = BillingPolicy::parse(&read_text(policy)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", policy.display())))?;
    let ring = PublicView::load(dir)?.keyring()?;
    let expected = tag_set(tags, untagged);
    let mut accepted = Vec::new();
    let mut rejected = 0;
    for path in logs {
        for m in read_reports(path)? {
            match provider_verify_measurement(&m, &ring, &expected) {
                Ok(v) => accepted.push(v),
                Err(e) => {
                    rejected += 1;
                    println!("REJECTED {}: {e}", m.digest());
                }
            }
        }
    }
    let invoice = compute_invoice(&accepted, &policy).map_err(|e| CliError::Usage(e.to_string()))?;
    let text = invoice.render();
    print!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    if rejected > 0 {
        return Err(CliError::Rejected(format!("{rejected} measurements excluded from the invoice")));
    }
    Ok(())
}

fn cmd_fuzz(cases: usize, seed: u64, artifact_dir: &Path) -> CliResult {
    let summary = fuzz_lower_bound(cases, seed, &FuzzConfig::default());
    if summary.passed() {
        println!("PASS {cases} cases, 0 violations (seed {seed})");
        return Ok(());
    }
    std::fs::create_dir_all(artifact_dir).map_err(|e| CliError::Usage(e.to_string()))?;
    for f in &summary.failures {
        let path = artifact_dir.join(format!("lowerbound-{seed}-{}.sched", f.index));
        write_text(&path, &render_case(&f.case))?;
        println!("case {}: {:?} -> {}", f.index, f.result, path.display());
    }
    Err(CliError::Rejected(format!(
        "{} of {cases} cases violated the lower bound",
        summary.failures.len()
    )))
}

fn cmd_replay(args: ReplayArgs) -> CliResult {
    let text = read_text(&args.schedule)?;
    let case = if text.contains("# program=") {
        parse_case(&text).map_err(|e| CliError::Usage(format!("{}: {e}", args.schedule.display())))?
    } else {
        let mut sc = scenario(args.config.as_deref(), args.tau, args.epsilon)?;
        if let Some(t) = args.timers {
            sc.timers = t;
        }
        let code = function_bytes_or(&args.function, sc.function.as_deref())?;
        let image = vm_load(&code).map_err(|e| CliError::Usage(e.to_string()))?;
        let input = parse_words(&args.input)?;
        return replay_image(&image, &input, &sc, &text, &args.schedule);
    };
    report_case(&case)
}

fn replay_image(
    image: &mfaas_core::vm::FunctionImage,
    input: &[u8],
    sc: &ScenarioConfig,
    text: &str,
    path: &Path,
) -> CliResult {
    use mfaas_core::runtime::{run_metered, RunRequest};
    let schedule = mfaas_core::experiments::parse_schedule(text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let run = run_metered(&RunRequest::new(image, input), &sc.run_config()?, &schedule)
        .map_err(|e| CliError::Rejected(format!("simulation: {e}")))?;
    verdict(run.t_max as u128 * run.tau as u128, run.true_resident_cycles(), run.t_max, run.tau)
}

fn report_case(case: &FuzzCase) -> CliResult {
    let r = check_case(case).map_err(|e| CliError::Rejected(format!("simulation: {e}")))?;
    let tau = case.config.timer.tau;
    verdict(r.metered, r.oracle, (r.metered / tau as u128) as u64, tau)
}

fn verdict(metered: u128, oracle: u64, t_max: u64, tau: u64) -> CliResult {
    println!("t_max={t_max} tau={tau} metered_cycles={metered} resident_cycles={oracle}");
    if metered <= oracle as u128 {
        println!("PASS lower bound holds");
        Ok(())
    } else {
        Err(CliError::Rejected("metered time exceeds resident time".into()))
    }
}

fn parse_ns(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("bad --ns {text}"));
    let parts: Vec<&str> = text.split(':').collect();
    if let [a, b, c] = parts[..] {
        let (a, b, c): (u64, u64, u64) = (
            a.parse().map_err(|_| bad())?,
            b.parse().map_err(|_| bad())?,
            c.parse().map_err(|_| bad())?,
        );
        if c == 0 || a > b {
            return Err(bad());
        }
        return Ok((a..=b).step_by(c as usize).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_experiment(args: ExperimentArgs) -> CliResult {
    let name: ExperimentName = args
        .name
        .parse()
        .map_err(|e: mfaas_core::experiments::UnknownExperiment| CliError::Usage(e.to_string()))?;
    let params = ExperimentParams {
        tau: args.tau,
        epsilon: args.epsilon,
        ns: parse_ns(&args.ns)?,
        taus: args.taus,
        repetitions: args.repetitions,
        noise: args.noise,
        seed: args.seed,
        network_pairs: args.pairs,
    };
    let csv = run_experiment(name, &params).map_err(|e| CliError::Usage(e.to_string()))?;
    match &args.out {
        Some(path) => {
            write_text(path, &csv.render())?;
            println!("wrote {} ({} rows)", path.display(), csv.rows.len());
        }
        None => print!("{}", csv.render()),
    }
    let fit = |x: &str, y: &str, degree| {
        Some((csv.column(x)?, csv.column(y)?))
            .and_then(|(xs, ys)| polyfit(&xs, &ys, degree))
            .map(|f| f.r_squared)
    };
    let summary = match name {
        ExperimentName::FibTiming => fit("n", "t_max", 1).map(|r| format!("linear fit of t_max: R^2 = {r:.6}")),
        ExperimentName::FibMemory => fit("n", "m_int", 2).map(|r| format!("quadratic fit of m_int: R^2 = {r:.6}")),
        _ => None,
    };
    if let Some(s) = summary {
        eprintln!("{s}");
    }
    Ok(())
}
