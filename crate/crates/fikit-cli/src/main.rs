//! Command-line harness: build profiles from trace files, run scheduling
//! experiments, compare JCT reports, and serve or exercise the datagram
//! scheduling protocol.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fikit_core::device_sim::JctReport;
use fikit_core::harness::{self, ExperimentConfig, ReportFormat};
use fikit_core::kernel_model::{read_trace_file, write_trace_file, TimeUs};
use fikit_core::profiler::ProfileStore;
use fikit_core::wire::{ClientSession, SessionConfig, UdpScheduler};
use fikit_core::{
    build_profile, jct_speedup, perturb_durations, ClientId, Priority, SchedMode, Scheduler,
    SchedulerConfig, WorkloadSpec,
};

#[derive(Parser)]
#[command(
    name = "fikit",
    about = "Priority GPU scheduling with inter-kernel gap filling: profiling, simulation, and protocol tools",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a per-task profile from a trace file and store it.
    ProfileBuild(ProfileBuildArgs),
    /// Run a scheduling experiment and emit a report.
    Run(RunArgs),
    /// Compare two JCT report files and print per-task speedup ratios.
    Compare(CompareArgs),
    /// Start the UDP scheduler.
    ProtocolServe(ServeArgs),
    /// Replay a trace file against a running scheduler as a hook client.
    ProtocolReplay(ReplayArgs),
    /// Generate a synthetic workload and write its measurement runs as a
    /// trace file.
    GenTrace(GenTraceArgs),
}

#[derive(Args)]
struct ProfileBuildArgs {
    /// Trace file with one or more runs of a single task.
    #[arg(long)]
    traces: PathBuf,
    /// Profile store directory.
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline config overrides, e.g. --set seeds=1,2,3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Scheduling modes to compare (comma separated: fikit,share,exclusive).
    #[arg(long)]
    modes: Option<String>,
    /// Scenario: concurrent, exclusive-ratio, or preemption.
    #[arg(long)]
    scenario: Option<String>,
    /// Simulation seeds (comma separated).
    #[arg(long)]
    seeds: Option<String>,
    /// Duration noise fraction in 0.0..=0.5.
    #[arg(long)]
    noise: Option<f64>,
    /// Runtime feedback: on or off.
    #[arg(long)]
    feedback: Option<String>,
    /// Minimum predicted idle worth filling, in microseconds.
    #[arg(long)]
    gap_threshold_us: Option<u64>,
    /// Measurement-phase wall-clock overhead ratio (1.0..=2.0).
    #[arg(long)]
    overhead: Option<f64>,
    /// Idle-prediction scale factor (experiments with misprediction).
    #[arg(long)]
    gap_scale: Option<f64>,
    /// Report output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: table, tsv, or structured.
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline JCT report file.
    #[arg(long)]
    baseline: PathBuf,
    /// Candidate JCT report file.
    #[arg(long)]
    candidate: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Bind address, e.g. 127.0.0.1:7700.
    #[arg(long, default_value = "127.0.0.1:7700")]
    bind: String,
    /// Scheduling mode.
    #[arg(long, default_value = "fikit")]
    mode: String,
    /// Profile store to preload predictions from.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Runtime feedback: on or off.
    #[arg(long, default_value = "on")]
    feedback: String,
    /// Minimum predicted idle worth filling, in microseconds.
    #[arg(long, default_value_t = 100)]
    gap_threshold_us: u64,
}

#[derive(Args)]
struct ReplayArgs {
    /// Scheduler address, e.g. 127.0.0.1:7700.
    #[arg(long)]
    server: String,
    /// Trace file to replay.
    #[arg(long)]
    traces: PathBuf,
    /// Priority level 0..=9 (0 highest).
    #[arg(long, default_value_t = 0)]
    priority: u8,
    /// Scheduling mode to request.
    #[arg(long, default_value = "fikit")]
    mode: String,
    /// Client id; defaults to the process id.
    #[arg(long)]
    client_id: Option<u64>,
    /// Divide all simulated durations by this factor when sleeping.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
}

#[derive(Args)]
struct GenTraceArgs {
    /// Stock workload: gap-rich or gap-poor.
    #[arg(long, default_value = "gap-rich")]
    preset: String,
    /// Number of measurement runs to emit.
    #[arg(long, default_value_t = 10)]
    runs: u32,
    /// Per-run duration noise fraction.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<SchedMode> {
    s.parse::<SchedMode>().map_err(|e| anyhow::anyhow!(e))
}

fn cmd_profile_build(args: ProfileBuildArgs) -> Result<()> {
    let file = fs::File::open(&args.traces)
        .with_context(|| format!("opening {}", args.traces.display()))?;
    let (task_key, runs) = read_trace_file(BufReader::new(file))?;
    let profile = build_profile(&task_key, &runs)?;
    let store = ProfileStore::new(&args.store)?;
    let path = store.save(&profile)?;
    println!(
        "profiled {} over {} runs: {} unique kernels -> {}",
        task_key.canonical(),
        profile.t_runs(),
        profile.unique_id_count(),
        path.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            harness::parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for set in &args.sets {
        let (k, v) = set
            .split_once('=')
            .with_context(|| format!("--set wants KEY=VALUE, got {set:?}"))?;
        cfg.apply_kv(k.trim(), v)?;
    }
    let flag_kvs: Vec<(&str, Option<String>)> = vec![
        ("scenario", args.scenario.clone()),
        ("modes", args.modes.clone()),
        ("seeds", args.seeds.clone()),
        ("noise_pct", args.noise.map(|v| v.to_string())),
        ("feedback", args.feedback.clone()),
        (
            "gap_threshold_us",
            args.gap_threshold_us.map(|v| v.to_string()),
        ),
        ("overhead_ratio", args.overhead.map(|v| v.to_string())),
        ("gap_prediction_scale", args.gap_scale.map(|v| v.to_string())),
    ];
    for (k, v) in flag_kvs.into_iter() {
        if let Some(v) = v {
            cfg.apply_kv(k, &v)?;
        }
    }
    let format: ReportFormat = args.format.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    let report = harness::run_experiment(&cfg)?;
    match &args.out {
        Some(path) => {
            let mut buf = Vec::new();
            harness::emit_report(&report, format, &mut buf)?;
            fs::write(path, &buf).with_context(|| format!("writing {}", path.display()))?;
            println!("report written to {}", path.display());
        }
        None => {
            let stdout = std::io::stdout();
            harness::emit_report(&report, format, &mut stdout.lock())?;
        }
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let load = |path: &PathBuf| -> Result<JctReport> {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(JctReport::read_text(BufReader::new(file))?)
    };
    let baseline = load(&args.baseline)?;
    let candidate = load(&args.candidate)?;
    let table = jct_speedup(&candidate, &baseline);
    println!(
        "{:<40} {:>14} {:>14} {:>10}",
        "task", "candidate_us", "baseline_us", "speedup"
    );
    for row in &table.rows {
        println!(
            "{:<40} {:>14} {:>14} {:>10.4}",
            row.task_key.canonical(),
            row.mean_a,
            row.mean_b,
            row.ratio
        );
    }
    if let (Some(mean), Some(min), Some(max)) =
        (table.mean_ratio(), table.min_ratio(), table.max_ratio())
    {
        println!("mean {mean:.4}  min {min:.4}  max {max:.4}");
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let cfg = SchedulerConfig {
        gap_threshold: TimeUs(args.gap_threshold_us),
        feedback: match args.feedback.as_str() {
            "on" => true,
            "off" => false,
            other => bail!("bad --feedback {other:?}"),
        },
        ..SchedulerConfig::default()
    };
    let mut scheduler = Scheduler::new(mode, cfg);
    if let Some(dir) = &args.profiles {
        let store = ProfileStore::new(dir)?;
        for profile in store.load_all()? {
            log::info!("loaded profile for {}", profile.task_key().canonical());
            scheduler.load_profile(profile);
        }
    }
    let mut server = UdpScheduler::bind(&args.bind, scheduler)?;
    println!("scheduler ({mode}) listening on {}", server.local_addr()?);
    let shutdown = AtomicBool::new(false);
    server.serve(&shutdown)?;
    Ok(())
}

fn scaled_sleep(t: TimeUs, scale: f64) {
    if t.is_zero() || scale <= 0.0 {
        return;
    }
    let us = (t.as_u64() as f64 / scale).round() as u64;
    std::thread::sleep(Duration::from_micros(us));
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let priority = Priority::new(args.priority)?;
    let file = fs::File::open(&args.traces)
        .with_context(|| format!("opening {}", args.traces.display()))?;
    let (task_key, runs) = read_trace_file(BufReader::new(file))?;
    if runs.is_empty() {
        bail!("trace file has no runs");
    }
    let client = ClientId(args.client_id.unwrap_or_else(|| std::process::id() as u64));
    let mut session = ClientSession::connect(&args.server, client, SessionConfig::default())?;
    session.register(task_key.clone(), priority, mode)?;
    println!(
        "registered {} as {} at priority {}",
        task_key.canonical(),
        client,
        priority
    );

    let mut seq = 0u64;
    for run in &runs {
        let started = Instant::now();
        for inv in &run.invocations {
            seq += 1;
            let kind = session.launch(inv.kernel_id.clone(), seq)?;
            log::debug!("kernel {} granted as {kind}", inv.kernel_id);
            // Stand-in for the device executing the kernel.
            scaled_sleep(inv.exec_time, args.time_scale);
            session.complete(seq, inv.exec_time)?;
            if let Some(gap) = inv.idle_after {
                scaled_sleep(gap, args.time_scale);
            }
        }
        println!(
            "run {}: {} kernels in {:.3}s wall",
            run.run_index,
            run.invocations.len(),
            started.elapsed().as_secs_f64()
        );
    }
    session.done()?;
    println!("task done after {seq} kernels");
    Ok(())
}

fn cmd_gen_trace(args: GenTraceArgs) -> Result<()> {
    let mut spec = WorkloadSpec::preset(&args.preset)
        .with_context(|| format!("unknown preset {:?}", args.preset))?;
    spec.seed = args.seed;
    let base = fikit_core::generate_workload(&spec)?.remove(0).script;
    let mut runs = Vec::with_capacity(args.runs as usize);
    for t in 0..args.runs.max(1) {
        let mut run = perturb_durations(&base, args.noise, args.seed ^ (t as u64 + 1))?;
        run.run_index = t + 1;
        runs.push(run);
    }
    let mut buf = Vec::new();
    write_trace_file(&mut buf, &base.task_key, &runs)?;
    fs::write(&args.out, &buf).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} runs of {} ({} kernels each) to {}",
        runs.len(),
        base.task_key.canonical(),
        base.kernel_count(),
        args.out.display()
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ProfileBuild(args) => cmd_profile_build(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::ProtocolServe(args) => cmd_serve(args),
        Command::ProtocolReplay(args) => cmd_replay(args),
        Command::GenTrace(args) => cmd_gen_trace(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
