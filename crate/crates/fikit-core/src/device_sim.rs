//! Deterministic discrete-event model of a single GPU device.
//!
//! The device executes kernels from a non-preemptive FIFO queue. Each task
//! is replayed by a simulated client: the next kernel's launch request is
//! emitted one think-time gap after the previous kernel's completion reaches
//! the client, which is what makes inter-kernel gaps a property of the
//! client and lets fill kernels genuinely overlap them. All state advances
//! on a virtual clock; identical inputs and seeds produce bit-identical
//! decision logs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernel_model::{KernelId, Priority, RunTrace, TaskKey, TimeUs, TraceError};
use crate::profiler::Profile;
use crate::scheduler::{
    ClientId, DecisionKind, Dispatch, SchedMode, Scheduler, SchedulerConfig, SchedulerError,
};

/// One task instance to simulate: a ground-truth script replayed
/// `repeat_count` times starting at `issue_time`.
#[derive(Clone, Debug)]
pub struct SimTask {
    pub task_key: TaskKey,
    pub priority: Priority,
    pub script: RunTrace,
    pub issue_time: TimeUs,
    pub repeat_count: u32,
}

/// What happens when a task arrives while another holds an exclusive device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExclusivePolicy {
    /// An external orchestrator runs tasks serially in priority order; a
    /// waiting task's JCT still counts from its original issue time.
    Queue,
    /// The later arrival fails to start, mirroring a device that cannot be
    /// occupied twice.
    Fail,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub scheduler: SchedulerConfig,
    /// One-way latency of a client-to-scheduler control message.
    pub transport_latency: TimeUs,
    /// Client think time between consecutive repeats of a task.
    pub inter_run_gap: TimeUs,
    pub exclusive_policy: ExclusivePolicy,
    /// Echoed into reports for reproduction; the replay itself is
    /// noise-free (callers perturb scripts up front).
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scheduler: SchedulerConfig::default(),
            transport_latency: TimeUs::ZERO,
            inter_run_gap: TimeUs::ZERO,
            exclusive_policy: ExclusivePolicy::Queue,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no tasks to simulate")]
    NoTasks,
    #[error("task {index} has an invalid script: {source}")]
    InvalidScript {
        index: usize,
        #[source]
        source: TraceError,
    },
    #[error("task {index} has repeat_count 0")]
    ZeroRepeats { index: usize },
    #[error("noise fraction {0} outside 0.0..=0.5")]
    NoiseOutOfRange(f64),
    #[error("scheduler rejected a simulated event: {0}")]
    Scheduler(#[from] SchedulerError),
    #[error("client {client} exhausted its retransmission budget")]
    WireTimeout { client: ClientId },
}

/// Discrete event kinds, in tie-break order: completions are observed
/// before think-timers expire, think-timers before launch arrivals, and
/// device starts after everything else at the same instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SimEventKind {
    KernelEnd,
    GapEnd,
    LaunchRequest,
    KernelStart,
    TaskDone,
}

/// A timestamped simulator event. Events are processed in non-decreasing
/// time, ties broken by kind order then by creation order.
#[derive(Clone, Debug)]
pub struct SimEvent {
    pub time: TimeUs,
    pub kind: SimEventKind,
    pub client: ClientId,
    pub seq: u64,
}

struct Scheduled {
    event: SimEvent,
    id: u64,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest first.
        (other.event.time, other.event.kind, other.id).cmp(&(
            self.event.time,
            self.event.kind,
            self.id,
        ))
    }
}

/// One dispatch decision with its device-queue lifecycle timestamps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionRecord {
    /// When the launch request reached the scheduler.
    pub requested: TimeUs,
    /// When the scheduler sent the kernel to the device queue.
    pub dispatched: TimeUs,
    pub started: TimeUs,
    pub ended: TimeUs,
    pub client: ClientId,
    /// The client's kernel sequence number for this dispatch.
    pub seq: u64,
    pub task_key: TaskKey,
    pub kernel_id: KernelId,
    pub kind: DecisionKind,
    pub gap_id: Option<u64>,
}

impl DecisionRecord {
    pub fn actual_exec(&self) -> TimeUs {
        self.ended.saturating_sub(self.started)
    }
}

/// Dispatch-ordered decision log.
///
/// Text columns (tab-separated): `requested_us dispatched_us started_us
/// ended_us client task kernel kind gap`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecisionLog(pub Vec<DecisionRecord>);

impl DecisionLog {
    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "# requested_us\tdispatched_us\tstarted_us\tended_us\tclient\tseq\ttask\tkernel\tkind\tgap"
        )?;
        for r in &self.0 {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.requested,
                r.dispatched,
                r.started,
                r.ended,
                r.client,
                r.seq,
                r.task_key.canonical(),
                r.kernel_id,
                r.kind,
                r.gap_id.map_or("-".to_string(), |g| g.to_string())
            )?;
        }
        Ok(())
    }

    /// The order-defining content of each decision, timestamps stripped.
    /// Two runs that made the same decisions in the same order compare
    /// equal here even if their clocks differ.
    pub fn semantic_rows(&self) -> Vec<(ClientId, u64, String, DecisionKind, Option<u64>)> {
        self.0
            .iter()
            .map(|r| {
                (
                    r.client,
                    r.seq,
                    r.kernel_id.to_string(),
                    r.kind,
                    r.gap_id,
                )
            })
            .collect()
    }

    pub fn fill_count(&self) -> usize {
        self.0
            .iter()
            .filter(|r| r.kind == DecisionKind::Fill)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    FailedToStart,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Completed => f.write_str("completed"),
            RunStatus::FailedToStart => f.write_str("failed-to-start"),
        }
    }
}

/// Completion record of one run (one repeat) of a task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunRecord {
    pub client: ClientId,
    pub task_key: TaskKey,
    /// 1-based repeat ordinal.
    pub run_ord: u32,
    pub issued: TimeUs,
    pub ended: TimeUs,
    pub jct: TimeUs,
    pub status: RunStatus,
}

/// Per-run job completion times for one simulation, plus aggregates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JctReport {
    pub mode: SchedMode,
    pub runs: Vec<RunRecord>,
}

impl JctReport {
    pub fn completed_runs<'a>(
        &'a self,
        key: &'a TaskKey,
    ) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs
            .iter()
            .filter(move |r| r.status == RunStatus::Completed && r.task_key == *key)
    }

    pub fn task_keys(&self) -> Vec<TaskKey> {
        let mut keys: Vec<TaskKey> = Vec::new();
        for r in &self.runs {
            if !keys.contains(&r.task_key) {
                keys.push(r.task_key.clone());
            }
        }
        keys
    }

    /// Mean JCT over completed runs of the task, half-up rounded.
    pub fn mean_jct(&self, key: &TaskKey) -> Option<TimeUs> {
        let mut sum: u128 = 0;
        let mut n: u128 = 0;
        for r in self.completed_runs(key) {
            sum += r.jct.as_u64() as u128;
            n += 1;
        }
        (n > 0).then(|| TimeUs(crate::kernel_model::div_round_half_up(sum, n)))
    }

    /// JCT percentile (nearest-rank) over completed runs of the task.
    pub fn percentile_jct(&self, key: &TaskKey, pct: u8) -> Option<TimeUs> {
        let mut jcts: Vec<TimeUs> = self.completed_runs(key).map(|r| r.jct).collect();
        if jcts.is_empty() {
            return None;
        }
        jcts.sort();
        let rank = ((pct.min(100) as usize * jcts.len()).div_ceil(100)).max(1);
        Some(jcts[rank - 1])
    }

    /// Total span from the first issue to the last completion of the task.
    pub fn total_span(&self, key: &TaskKey) -> Option<TimeUs> {
        let first = self.completed_runs(key).map(|r| r.issued).min()?;
        let last = self.completed_runs(key).map(|r| r.ended).max()?;
        last.checked_sub(first)
    }

    /// Text form: a mode line, then one tab-separated row per run:
    /// `client task run issued_us ended_us jct_us status`.
    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "fikit-jct v1 {}", self.mode)?;
        writeln!(w, "# client\ttask\trun\tissued_us\tended_us\tjct_us\tstatus")?;
        for r in &self.runs {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.client.0,
                r.task_key.canonical(),
                r.run_ord,
                r.issued,
                r.ended,
                r.jct,
                r.status
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<JctReport, io::Error> {
        let bad = |reason: &str| io::Error::new(io::ErrorKind::InvalidData, reason.to_string());
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty report"))??;
        let mode_str = header
            .strip_prefix("fikit-jct v1 ")
            .ok_or_else(|| bad("bad report header"))?;
        let mode = SchedMode::from_str(mode_str).map_err(|e| bad(&e))?;
        let mut runs = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields per run row"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad numeric field"));
            runs.push(RunRecord {
                client: ClientId(num(f[0])?),
                task_key: TaskKey::parse_canonical(f[1])
                    .map_err(|e| bad(&format!("bad task key: {e}")))?,
                run_ord: num(f[2])? as u32,
                issued: TimeUs(num(f[3])?),
                ended: TimeUs(num(f[4])?),
                jct: TimeUs(num(f[5])?),
                status: match f[6] {
                    "completed" => RunStatus::Completed,
                    "failed-to-start" => RunStatus::FailedToStart,
                    other => return Err(bad(&format!("bad status {other:?}"))),
                },
            });
        }
        Ok(JctReport { mode, runs })
    }
}

impl FromStr for SchedMode {
    type Err = String;

    fn from_str(s: &str) -> Result<SchedMode, String> {
        match s {
            "fikit" => Ok(SchedMode::Fikit),
            "share" => Ok(SchedMode::DefaultShare),
            "exclusive" => Ok(SchedMode::Exclusive),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Per-task JCT ratio between two reports over the same task set:
/// `ratio = mean_jct(b) / mean_jct(a)` per task, so with `a` the candidate
/// and `b` the baseline a ratio of 2.0 means the candidate is twice as fast.
#[derive(Clone, Debug)]
pub struct SpeedupRow {
    pub task_key: TaskKey,
    pub mean_a: TimeUs,
    pub mean_b: TimeUs,
    pub ratio: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SpeedupTable {
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupTable {
    pub fn mean_ratio(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.ratio).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn min_ratio(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.ratio).reduce(f64::min)
    }

    pub fn max_ratio(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.ratio).reduce(f64::max)
    }
}

pub fn jct_speedup(a: &JctReport, b: &JctReport) -> SpeedupTable {
    let mut rows = Vec::new();
    for key in a.task_keys() {
        let (Some(mean_a), Some(mean_b)) = (a.mean_jct(&key), b.mean_jct(&key)) else {
            continue;
        };
        // Completed runs have at least one kernel, so mean_a is positive.
        let ratio = mean_b.as_u64() as f64 / mean_a.as_u64() as f64;
        rows.push(SpeedupRow {
            task_key: key,
            mean_a,
            mean_b,
            ratio,
        });
    }
    SpeedupTable { rows }
}

/// Multiply every execution time and idle gap by a factor drawn uniformly
/// from `[1 - noise_pct, 1 + noise_pct]`, deterministically per seed. The
/// trace structure and kernel identities are unchanged.
pub fn perturb_durations(
    script: &RunTrace,
    noise_pct: f64,
    seed: u64,
) -> Result<RunTrace, SimError> {
    if !(0.0..=0.5).contains(&noise_pct) || !noise_pct.is_finite() {
        return Err(SimError::NoiseOutOfRange(noise_pct));
    }
    let spread_ppm = (noise_pct * 1_000_000.0).round() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |t: TimeUs| {
        let factor = rng.random_range(1_000_000 - spread_ppm..=1_000_000 + spread_ppm);
        t.scale_ppm(factor)
    };
    let invocations = script
        .invocations
        .iter()
        .map(|inv| crate::kernel_model::KernelInvocation {
            kernel_id: inv.kernel_id.clone(),
            exec_time: draw(inv.exec_time),
            idle_after: inv.idle_after.map(&mut draw),
        })
        .collect();
    Ok(RunTrace::new(
        script.task_key.clone(),
        script.run_index,
        invocations,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ClientStatus {
    Pending,
    Active,
    Done,
    Failed,
}

struct ClientState {
    client: ClientId,
    task: SimTask,
    status: ClientStatus,
    registered: bool,
    cur_run: u32,
    run_issued: TimeUs,
}

impl ClientState {
    fn kernels_per_run(&self) -> u64 {
        self.task.script.invocations.len() as u64
    }

    fn pos_for_seq(&self, seq: u64) -> usize {
        ((seq - 1) % self.kernels_per_run()) as usize
    }

    fn kernel_for_seq(&self, seq: u64) -> &crate::kernel_model::KernelInvocation {
        &self.task.script.invocations[self.pos_for_seq(seq)]
    }

    fn is_last_in_run(&self, seq: u64) -> bool {
        self.pos_for_seq(seq) + 1 == self.kernels_per_run() as usize
    }
}

struct DeviceEntry {
    client: ClientId,
    seq: u64,
    exec: TimeUs,
    rec: usize,
}

/// Simulation output: per-run JCTs and the dispatch decision log.
pub struct SimOutcome {
    pub report: JctReport,
    pub log: DecisionLog,
}

struct Engine {
    clock: TimeUs,
    heap: BinaryHeap<Scheduled>,
    next_event_id: u64,
    clients: Vec<ClientState>,
    scheduler: Scheduler,
    device: VecDeque<DeviceEntry>,
    device_busy: bool,
    records: Vec<DecisionRecord>,
    rec_index: BTreeMap<(ClientId, u64), usize>,
    run_records: Vec<RunRecord>,
    cfg: SimConfig,
    mode: SchedMode,
    /// Remaining activation order for exclusive orchestration.
    exclusive_queue: VecDeque<usize>,
}

impl Engine {
    fn push(&mut self, time: TimeUs, kind: SimEventKind, client: ClientId, seq: u64) {
        let event = SimEvent {
            time,
            kind,
            client,
            seq,
        };
        self.heap.push(Scheduled {
            event,
            id: self.next_event_id,
        });
        self.next_event_id += 1;
    }

    fn client(&mut self, id: ClientId) -> &mut ClientState {
        &mut self.clients[id.0 as usize - 1]
    }

    fn activate(&mut self, idx: usize, now: TimeUs) {
        let client = self.clients[idx].client;
        let issue = self.clients[idx].task.issue_time;
        let start = issue.max(now);
        self.clients[idx].status = ClientStatus::Active;
        self.push(
            start + self.cfg.transport_latency,
            SimEventKind::LaunchRequest,
            client,
            1,
        );
    }

    fn submit(&mut self, d: Dispatch, now: TimeUs) {
        let client = d.req.client_id;
        let seq = d.req.client_seq;
        let exec = self.client(client).kernel_for_seq(seq).exec_time;
        let rec = self.records.len();
        self.records.push(DecisionRecord {
            requested: d.req.arrived,
            dispatched: now,
            started: TimeUs::ZERO,
            ended: TimeUs::ZERO,
            client,
            seq,
            task_key: d.req.task_key.clone(),
            kernel_id: d.req.kernel_id.clone(),
            kind: d.kind,
            gap_id: d.gap_id,
        });
        self.rec_index.insert((client, seq), rec);
        self.device.push_back(DeviceEntry {
            client,
            seq,
            exec,
            rec,
        });
        if !self.device_busy {
            self.device_busy = true;
            self.push(now, SimEventKind::KernelStart, client, seq);
        }
    }

    fn submit_all(&mut self, dispatches: Vec<Dispatch>, now: TimeUs) {
        for d in dispatches {
            self.submit(d, now);
        }
    }

    fn on_launch(&mut self, client: ClientId, seq: u64, now: TimeUs) -> Result<(), SimError> {
        let state = self.client(client);
        if state.status != ClientStatus::Active {
            return Ok(());
        }
        let (task_key, priority) = (state.task.task_key.clone(), state.task.priority);
        if !state.registered {
            match self.scheduler.register(client, task_key, priority, self.mode) {
                Ok(()) => self.client(client).registered = true,
                Err(SchedulerError::ExclusiveOccupied) => {
                    // The device is taken; this task instance never starts.
                    let state = self.client(client);
                    state.status = ClientStatus::Failed;
                    let issued = state.task.issue_time;
                    let (task_key, client_id) = (state.task.task_key.clone(), state.client);
                    self.run_records.push(RunRecord {
                        client: client_id,
                        task_key,
                        run_ord: 1,
                        issued,
                        ended: issued,
                        jct: TimeUs::ZERO,
                        status: RunStatus::FailedToStart,
                    });
                    return Ok(());
                }
                Err(e) => return Err(e.into()),
            }
        }
        let kernel_id = self.client(client).kernel_for_seq(seq).kernel_id.clone();
        let dispatches = self
            .scheduler
            .on_kernel_launch(client, kernel_id, seq, now)?;
        self.submit_all(dispatches, now);
        Ok(())
    }

    fn on_kernel_start(&mut self, client: ClientId, seq: u64, now: TimeUs) {
        let front = self.device.front().expect("start implies queued kernel");
        debug_assert_eq!((front.client, front.seq), (client, seq));
        let (rec, exec) = (front.rec, front.exec);
        self.records[rec].started = now;
        self.push(now + exec, SimEventKind::KernelEnd, client, seq);
    }

    fn on_kernel_end(&mut self, client: ClientId, seq: u64, now: TimeUs) -> Result<(), SimError> {
        let entry = self.device.pop_front().expect("ending kernel was queued");
        debug_assert_eq!((entry.client, entry.seq), (client, seq));
        self.records[entry.rec].ended = now;
        if let Some(next) = self.device.front() {
            let (c, s) = (next.client, next.seq);
            self.push(now, SimEventKind::KernelStart, c, s);
        } else {
            self.device_busy = false;
        }

        let dispatches = self
            .scheduler
            .on_kernel_complete(client, seq, entry.exec, now);
        self.submit_all(dispatches, now);

        // Client-side continuation: think, then request the next kernel.
        let state = self.client(client);
        if !state.is_last_in_run(seq) {
            let think = state
                .kernel_for_seq(seq)
                .idle_after
                .expect("non-final kernel has a gap");
            self.push(now + think, SimEventKind::GapEnd, client, seq + 1);
            return Ok(());
        }

        // Run finished.
        let run_ord = state.cur_run + 1;
        let issued = state.run_issued;
        let (task_key, client_id) = (state.task.task_key.clone(), state.client);
        state.cur_run = run_ord;
        let more_runs = state.cur_run < state.task.repeat_count;
        let inter_run = self.cfg.inter_run_gap;
        self.run_records.push(RunRecord {
            client: client_id,
            task_key,
            run_ord,
            issued,
            ended: now,
            jct: now.checked_sub(issued).expect("run ends after issue"),
            status: RunStatus::Completed,
        });
        if more_runs {
            let state = self.client(client);
            state.run_issued = now + inter_run;
            self.push(now + inter_run, SimEventKind::GapEnd, client, seq + 1);
        } else {
            self.push(
                now + self.cfg.transport_latency,
                SimEventKind::TaskDone,
                client,
                0,
            );
        }
        Ok(())
    }

    fn on_task_done(&mut self, client: ClientId, now: TimeUs) {
        self.client(client).status = ClientStatus::Done;
        let dispatches = self.scheduler.on_task_done(client, now);
        self.submit_all(dispatches, now);
        if let Some(next_idx) = self.exclusive_queue.pop_front() {
            self.activate(next_idx, now);
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(Scheduled { event, .. }) = self.heap.pop() {
            debug_assert!(event.time >= self.clock, "time must not move backwards");
            self.clock = event.time;
            let now = event.time;
            match event.kind {
                SimEventKind::LaunchRequest => self.on_launch(event.client, event.seq, now)?,
                SimEventKind::GapEnd => {
                    // Think time over: the launch request travels to the
                    // scheduler.
                    let at = now + self.cfg.transport_latency;
                    self.push(at, SimEventKind::LaunchRequest, event.client, event.seq);
                }
                SimEventKind::KernelStart => self.on_kernel_start(event.client, event.seq, now),
                SimEventKind::KernelEnd => self.on_kernel_end(event.client, event.seq, now)?,
                SimEventKind::TaskDone => self.on_task_done(event.client, now),
            }
        }
        Ok(())
    }
}

/// Run one deterministic simulation of the given tasks under a scheduling
/// mode. Profiles feed the scheduler's predictions (they matter only in
/// gap-filling mode).
pub fn run_simulation(
    tasks: &[SimTask],
    mode: SchedMode,
    cfg: &SimConfig,
    profiles: &[Profile],
) -> Result<SimOutcome, SimError> {
    if tasks.is_empty() {
        return Err(SimError::NoTasks);
    }
    for (index, task) in tasks.iter().enumerate() {
        task.script
            .validate()
            .map_err(|source| SimError::InvalidScript { index, source })?;
        if task.repeat_count == 0 {
            return Err(SimError::ZeroRepeats { index });
        }
    }

    let mut scheduler = Scheduler::new(mode, cfg.scheduler.clone());
    for profile in profiles {
        scheduler.load_profile(profile.clone());
    }

    let clients: Vec<ClientState> = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| ClientState {
            client: ClientId(i as u64 + 1),
            task: task.clone(),
            status: ClientStatus::Pending,
            registered: false,
            cur_run: 0,
            run_issued: task.issue_time,
        })
        .collect();

    let mut engine = Engine {
        clock: TimeUs::ZERO,
        heap: BinaryHeap::new(),
        next_event_id: 0,
        clients,
        scheduler,
        device: VecDeque::new(),
        device_busy: false,
        records: Vec::new(),
        rec_index: BTreeMap::new(),
        run_records: Vec::new(),
        cfg: cfg.clone(),
        mode,
        exclusive_queue: VecDeque::new(),
    };

    if mode == SchedMode::Exclusive && cfg.exclusive_policy == ExclusivePolicy::Queue {
        // Serial orchestration in priority order (ties by issue time, then
        // task order); each task activates when its predecessor finishes.
        let mut order: Vec<usize> = (0..engine.clients.len()).collect();
        order.sort_by_key(|&i| {
            (
                engine.clients[i].task.priority,
                engine.clients[i].task.issue_time,
                i,
            )
        });
        let mut order = VecDeque::from(order);
        let first = order.pop_front().expect("tasks non-empty");
        engine.exclusive_queue = order;
        engine.activate(first, TimeUs::ZERO);
    } else {
        for i in 0..engine.clients.len() {
            engine.activate(i, TimeUs::ZERO);
        }
    }

    engine.run()?;

    let mut runs = engine.run_records;
    runs.sort_by_key(|r| (r.client, r.run_ord));
    Ok(SimOutcome {
        report: JctReport {
            mode,
            runs,
        },
        log: DecisionLog(engine.records),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_model::KernelInvocation;
    use crate::profiler::build_profile;
    use std::collections::BTreeSet;

    fn script(task: &TaskKey, steps: &[(u64, u64)]) -> RunTrace {
        // (exec, gap) pairs; the final gap value is ignored.
        let n = steps.len();
        let invocations = steps
            .iter()
            .enumerate()
            .map(|(i, (exec, gap))| KernelInvocation {
                kernel_id: KernelId::new(
                    format!("{}_k{i}", task.process_name()),
                    (64, 1, 1),
                    (i as u32 + 1, 1, 1),
                )
                .unwrap(),
                exec_time: TimeUs(*exec),
                idle_after: (i + 1 < n).then_some(TimeUs(*gap)),
            })
            .collect();
        RunTrace::new(task.clone(), 1, invocations)
    }

    fn task(name: &str, prio: u8, issue: u64, repeats: u32, steps: &[(u64, u64)]) -> SimTask {
        let key = TaskKey::new(name, Vec::<String>::new()).unwrap();
        SimTask {
            task_key: key.clone(),
            priority: Priority::new(prio).unwrap(),
            script: script(&key, steps),
            issue_time: TimeUs(issue),
            repeat_count: repeats,
        }
    }

    fn perfect_profile(t: &SimTask) -> Profile {
        build_profile(&t.task_key, std::slice::from_ref(&t.script)).unwrap()
    }

    #[test]
    fn solo_replay_jct_equals_exec_plus_gaps() {
        let t = task("a", 0, 0, 1, &[(1000, 5000), (2000, 3000), (1500, 0)]);
        let expected = t.script.base_jct();
        for mode in [SchedMode::Fikit, SchedMode::DefaultShare, SchedMode::Exclusive] {
            let out = run_simulation(
                std::slice::from_ref(&t),
                mode,
                &SimConfig::default(),
                &[perfect_profile(&t)],
            )
            .unwrap();
            assert_eq!(out.report.runs.len(), 1);
            assert_eq!(out.report.runs[0].jct, expected, "mode {mode}");
            assert_eq!(out.report.runs[0].status, RunStatus::Completed);
        }
    }

    #[test]
    fn solo_repeats_accumulate_back_to_back() {
        let t = task("a", 0, 0, 5, &[(1000, 2000), (500, 0)]);
        let out = run_simulation(
            std::slice::from_ref(&t),
            SchedMode::Fikit,
            &SimConfig::default(),
            &[],
        )
        .unwrap();
        assert_eq!(out.report.runs.len(), 5);
        let per_run = t.script.base_jct();
        for (i, run) in out.report.runs.iter().enumerate() {
            assert_eq!(run.jct, per_run);
            assert_eq!(run.issued, TimeUs(per_run.as_u64() * i as u64));
        }
    }

    #[test]
    fn exclusive_queue_policy_serializes_and_charges_waiting_time() {
        let a = task("a", 0, 0, 1, &[(4000, 1000), (4000, 0)]);
        let b = task("b", 1, 0, 1, &[(2000, 500), (2000, 0)]);
        let jct_a = a.script.base_jct();
        let jct_b = b.script.base_jct();
        let out = run_simulation(
            &[a.clone(), b.clone()],
            SchedMode::Exclusive,
            &SimConfig::default(),
            &[],
        )
        .unwrap();
        let runs_a: Vec<_> = out.report.completed_runs(&a.task_key).collect();
        let runs_b: Vec<_> = out.report.completed_runs(&b.task_key).collect();
        assert_eq!(runs_a[0].jct, jct_a);
        assert_eq!(runs_b[0].jct, jct_a + jct_b, "waiting time counts toward B");
    }

    #[test]
    fn exclusive_fail_policy_rejects_overlapping_task() {
        let a = task("a", 0, 0, 1, &[(4000, 1000), (4000, 0)]);
        let b = task("b", 1, 100, 1, &[(2000, 0)]);
        let cfg = SimConfig {
            exclusive_policy: ExclusivePolicy::Fail,
            ..SimConfig::default()
        };
        let out = run_simulation(&[a.clone(), b.clone()], SchedMode::Exclusive, &cfg, &[]).unwrap();
        let b_runs: Vec<_> = out
            .report
            .runs
            .iter()
            .filter(|r| r.task_key == b.task_key)
            .collect();
        assert_eq!(b_runs.len(), 1);
        assert_eq!(b_runs[0].status, RunStatus::FailedToStart);
        // A is unaffected.
        assert_eq!(
            out.report.completed_runs(&a.task_key).next().unwrap().jct,
            a.script.base_jct()
        );

        // A task issued after the device frees starts normally.
        let c = task("c", 1, 20_000, 1, &[(2000, 0)]);
        let out = run_simulation(&[a.clone(), c.clone()], SchedMode::Exclusive, &cfg, &[]).unwrap();
        assert_eq!(
            out.report.completed_runs(&c.task_key).count(),
            1,
            "device was free at issue time"
        );
    }

    #[test]
    fn idealized_two_task_gap_filling() {
        // A: three 1000us kernels with 5000us think gaps; B: three 4000us
        // kernels, back to back. Every B kernel fits an A gap, so with
        // perfect profiles A's JCT equals its solo JCT exactly and B ends
        // well before serial execution would allow.
        let a = task("a", 0, 0, 1, &[(1000, 5000), (1000, 5000), (1000, 0)]);
        let b = task("b", 1, 0, 1, &[(4000, 0), (4000, 0), (4000, 0)]);
        let profiles = vec![perfect_profile(&a), perfect_profile(&b)];
        let out = run_simulation(&[a.clone(), b.clone()], SchedMode::Fikit, &SimConfig::default(), &profiles)
            .unwrap();

        let a_solo = a.script.base_jct();
        let b_solo = b.script.base_jct();
        let a_jct = out.report.completed_runs(&a.task_key).next().unwrap().jct;
        let b_jct = out.report.completed_runs(&b.task_key).next().unwrap().jct;
        assert_eq!(a_jct, a_solo, "perfect prediction leaves A untouched");
        assert!(
            b_jct < a_solo + b_solo,
            "B ({b_jct}) must beat serial {}",
            a_solo + b_solo
        );
        assert!(out.log.fill_count() >= 2, "B ran inside A's gaps");
    }

    #[test]
    fn perturb_identity_determinism_and_mean() {
        let key = TaskKey::new("n", Vec::<String>::new()).unwrap();
        let base = script(&key, &[(1_000_000, 500_000); 40]);

        let same = perturb_durations(&base, 0.0, 9).unwrap();
        assert_eq!(same, base);

        let x = perturb_durations(&base, 0.2, 11).unwrap();
        let y = perturb_durations(&base, 0.2, 11).unwrap();
        let z = perturb_durations(&base, 0.2, 12).unwrap();
        assert_eq!(x, y, "same seed reproduces");
        assert_ne!(x, z, "different seed differs");

        for inv in &x.invocations {
            let e = inv.exec_time.as_u64();
            assert!((800_000..=1_200_000).contains(&e), "factor within bounds");
        }

        assert!(perturb_durations(&base, 0.6, 0).is_err());
        assert!(perturb_durations(&base, -0.1, 0).is_err());

        // Law of large numbers: the mean perturbation factor is ~1.
        let wide = script(&key, &[(1_000_000, 0); 10_000]);
        let noised = perturb_durations(&wide, 0.3, 1234).unwrap();
        let mean: f64 = noised
            .invocations
            .iter()
            .map(|inv| inv.exec_time.as_u64() as f64)
            .sum::<f64>()
            / 10_000.0;
        assert!((mean - 1_000_000.0).abs() / 1_000_000.0 < 0.01);
    }

    #[test]
    fn identical_inputs_yield_identical_logs_and_reports() {
        let a = task("a", 0, 0, 3, &[(1000, 4000), (2000, 0)]);
        let b = task("b", 2, 500, 3, &[(1500, 1000), (900, 0)]);
        let profiles = vec![perfect_profile(&a), perfect_profile(&b)];
        let run = || {
            run_simulation(
                &[a.clone(), b.clone()],
                SchedMode::Fikit,
                &SimConfig::default(),
                &profiles,
            )
            .unwrap()
        };
        let (o1, o2) = (run(), run());
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        o1.log.write_text(&mut t1).unwrap();
        o2.log.write_text(&mut t2).unwrap();
        assert_eq!(t1, t2);
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        o1.report.write_text(&mut r1).unwrap();
        o2.report.write_text(&mut r2).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn device_conserves_work_and_never_preempts() {
        let a = task("a", 0, 0, 4, &[(1000, 3000), (2000, 1000), (500, 0)]);
        let b = task("b", 3, 200, 4, &[(1200, 800), (700, 0)]);
        let profiles = vec![perfect_profile(&a), perfect_profile(&b)];
        for mode in [SchedMode::Fikit, SchedMode::DefaultShare] {
            let out =
                run_simulation(&[a.clone(), b.clone()], mode, &SimConfig::default(), &profiles)
                    .unwrap();
            let records = &out.log.0;
            // Every kernel of every repeat executed exactly once.
            assert_eq!(records.len(), 4 * 3 + 4 * 2);
            let unique: BTreeSet<(ClientId, u64)> =
                records.iter().map(|r| (r.client, r.seq)).collect();
            assert_eq!(unique.len(), records.len(), "no kernel executes twice");
            // Busy time equals the sum of actual executions; execution
            // intervals never overlap (non-preemptive device).
            let mut intervals: Vec<(TimeUs, TimeUs)> =
                records.iter().map(|r| (r.started, r.ended)).collect();
            intervals.sort();
            for w in intervals.windows(2) {
                assert!(w[0].1 <= w[1].0, "overlap: {:?} then {:?}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn equal_priority_fikit_matches_share_mode_order() {
        let a = task("a", 4, 0, 3, &[(1000, 1500), (800, 900), (1100, 0)]);
        let b = task("b", 4, 700, 3, &[(600, 1200), (1300, 0)]);
        let profiles = vec![perfect_profile(&a), perfect_profile(&b)];
        let fikit = run_simulation(
            &[a.clone(), b.clone()],
            SchedMode::Fikit,
            &SimConfig::default(),
            &profiles,
        )
        .unwrap();
        let share = run_simulation(
            &[a.clone(), b.clone()],
            SchedMode::DefaultShare,
            &SimConfig::default(),
            &profiles,
        )
        .unwrap();
        let order = |log: &DecisionLog| -> Vec<(ClientId, u64)> {
            log.0.iter().map(|r| (r.client, r.seq)).collect()
        };
        assert_eq!(order(&fikit.log), order(&share.log));
        assert!(fikit.log.fill_count() == 0, "equal priority never fills");
    }

    #[test]
    fn speedup_tables() {
        let a = task("a", 0, 0, 2, &[(1000, 500), (1000, 0)]);
        let out = run_simulation(
            std::slice::from_ref(&a),
            SchedMode::Fikit,
            &SimConfig::default(),
            &[],
        )
        .unwrap();
        let table = jct_speedup(&out.report, &out.report);
        assert_eq!(table.rows.len(), 1);
        assert!((table.rows[0].ratio - 1.0).abs() < 1e-12);

        // A service twice as fast in the candidate report scores 2.0.
        let mut slow = out.report.clone();
        for r in &mut slow.runs {
            r.jct = TimeUs(r.jct.as_u64() * 2);
        }
        let table = jct_speedup(&out.report, &slow);
        assert!((table.rows[0].ratio - 2.0).abs() < 1e-12);

        // Mode-total fixture: 49.894898s vs 41.628692s gives ~1.199.
        let key = TaskKey::new("svc-a", Vec::<String>::new()).unwrap();
        let mk = |jct_us: u64, mode| JctReport {
            mode,
            runs: vec![RunRecord {
                client: ClientId(1),
                task_key: key.clone(),
                run_ord: 1,
                issued: TimeUs::ZERO,
                ended: TimeUs(jct_us),
                jct: TimeUs(jct_us),
                status: RunStatus::Completed,
            }],
        };
        let fikit = mk(41_628_692, SchedMode::Fikit);
        let share = mk(49_894_898, SchedMode::DefaultShare);
        let table = jct_speedup(&fikit, &share);
        assert!((table.rows[0].ratio - 1.199).abs() < 1e-3);
    }

    #[test]
    fn jct_report_text_roundtrip() {
        let a = task("a", 0, 0, 2, &[(1000, 500), (1000, 0)]);
        let b = task("b", 5, 100, 1, &[(700, 0)]);
        let out = run_simulation(
            &[a, b],
            SchedMode::DefaultShare,
            &SimConfig::default(),
            &[],
        )
        .unwrap();
        let mut buf = Vec::new();
        out.report.write_text(&mut buf).unwrap();
        let parsed = JctReport::read_text(&buf[..]).unwrap();
        assert_eq!(parsed, out.report);
    }

    #[test]
    fn transport_latency_shifts_dispatch_times() {
        let t = task("a", 0, 0, 1, &[(1000, 2000), (1000, 0)]);
        let cfg = SimConfig {
            transport_latency: TimeUs(50),
            ..SimConfig::default()
        };
        let out = run_simulation(std::slice::from_ref(&t), SchedMode::Fikit, &cfg, &[]).unwrap();
        // Request for kernel 1 arrives at issue + latency.
        assert_eq!(out.log.0[0].requested, TimeUs(50));
        // JCT still counts from issue time.
        assert_eq!(
            out.report.runs[0].jct,
            TimeUs(1000 + 50 + 2000 + 50 + 1000)
        );
    }
}
