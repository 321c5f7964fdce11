//! The gap-filling scheduler: ten priority queues, priority scan and
//! dispatch, best-priority-fit selection of fill kernels for a holder's
//! predicted idle gaps, and runtime feedback that closes a gap the moment
//! the holder's next kernel arrives.
//!
//! The scheduler is a single logical event loop. Callers feed it launch,
//! completion, task-done, and gap-end events (each stamped with the current
//! time) and receive dispatch decisions to forward to the device queue. All
//! shared-mode dispatch is paced on an idle device so that at most one fill
//! kernel can ever be in flight past the true end of a gap.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::kernel_model::{KernelId, Priority, TaskKey, TimeUs, PRIORITY_LEVELS};
use crate::profiler::Profile;

/// Gaps predicted shorter than this are not worth filling: a kernel launch
/// itself costs on the order of 0.1ms.
pub const GAP_FILL_THRESHOLD: TimeUs = TimeUs(100);

/// Identifies one hook client (one running task instance).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u64);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Device scheduling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchedMode {
    /// Priority queues plus inter-kernel gap filling.
    Fikit,
    /// Priority-blind FIFO interleaving of all clients' launches.
    DefaultShare,
    /// One task owns the device; others are rejected.
    Exclusive,
}

impl fmt::Display for SchedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SchedMode::Fikit => "fikit",
            SchedMode::DefaultShare => "share",
            SchedMode::Exclusive => "exclusive",
        };
        f.write_str(s)
    }
}

/// Why a kernel was sent to the device queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DecisionKind {
    /// Dispatched as (or on behalf of) the device-holding task.
    Holder,
    /// Dispatched into another task's idle gap.
    Fill,
    /// Priority-blind FIFO dispatch (default sharing mode).
    Fifo,
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DecisionKind::Holder => "HOLDER",
            DecisionKind::Fill => "FILL",
            DecisionKind::Fifo => "FIFO",
        };
        f.write_str(s)
    }
}

/// A kernel launch waiting for (or granted) a scheduling decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelRequest {
    pub client_id: ClientId,
    pub task_key: TaskKey,
    pub kernel_id: KernelId,
    pub priority: Priority,
    /// Scheduler-global arrival order; unique per scheduler instance.
    pub arrival_seq: u64,
    /// The client's own kernel sequence number, strictly increasing.
    pub client_seq: u64,
    /// When the launch request reached the scheduler.
    pub arrived: TimeUs,
    /// Mean execution time from the task's profile; `None` for unprofiled
    /// tasks, which are then never chosen as fills.
    pub predicted_exec: Option<TimeUs>,
}

/// One dispatch decision to forward to the device queue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dispatch {
    pub req: KernelRequest,
    pub kind: DecisionKind,
    pub gap_id: Option<u64>,
}

/// The ten FIFO queues Q0..Q9, indexed by priority level.
#[derive(Debug, Default)]
pub struct PriorityQueues {
    levels: [VecDeque<KernelRequest>; PRIORITY_LEVELS],
}

impl PriorityQueues {
    pub fn new() -> PriorityQueues {
        PriorityQueues::default()
    }

    pub fn enqueue(&mut self, req: KernelRequest) {
        self.levels[req.priority.level() as usize].push_back(req);
    }

    /// The highest-priority non-empty level.
    pub fn highest_nonempty(&self) -> Option<Priority> {
        self.levels
            .iter()
            .position(|q| !q.is_empty())
            .map(|l| Priority::new(l as u8).expect("level in range"))
    }

    pub fn front(&self, priority: Priority) -> Option<&KernelRequest> {
        self.levels[priority.level() as usize].front()
    }

    pub fn pop_front(&mut self, priority: Priority) -> Option<KernelRequest> {
        self.levels[priority.level() as usize].pop_front()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(VecDeque::is_empty)
    }

    /// All queued requests, level by level, FIFO within each level.
    pub fn iter(&self) -> impl Iterator<Item = &KernelRequest> {
        self.levels.iter().flatten()
    }

    pub fn contains_client(&self, client: ClientId) -> bool {
        self.iter().any(|r| r.client_id == client)
    }
}

/// Select the best fill for a gap with `remaining` idle time.
///
/// Levels are scanned from `floor` downward (toward Q9). At the first level
/// holding at least one request whose predicted execution fits, the fitting
/// request with the longest predicted execution wins; ties go to the
/// earliest arrival. Requests without a prediction never fit. The winner is
/// dequeued and returned with its predicted execution time.
pub fn best_prio_fit(
    queues: &mut PriorityQueues,
    remaining: TimeUs,
    floor: Priority,
) -> Option<(KernelRequest, TimeUs)> {
    for level in floor.level() as usize..PRIORITY_LEVELS {
        let q = &queues.levels[level];
        let mut best: Option<(usize, TimeUs)> = None;
        for (idx, req) in q.iter().enumerate() {
            let Some(exec) = req.predicted_exec else {
                continue;
            };
            if exec > remaining {
                continue;
            }
            // Strictly-greater keeps the earliest arrival among equals.
            if best.is_none_or(|(_, e)| exec > e) {
                best = Some((idx, exec));
            }
        }
        if let Some((idx, exec)) = best {
            let req = queues.levels[level].remove(idx).expect("index valid");
            return Some((req, exec));
        }
    }
    None
}

/// An open idle gap of the device-holding task.
#[derive(Clone, Debug)]
pub struct GapState {
    id: u64,
    owner_client: ClientId,
    owner_task: TaskKey,
    owner_priority: Priority,
    after_kernel: KernelId,
    resolved: bool,
    predicted_idle: TimeUs,
    remaining_idle: TimeUs,
    fills_dispatched: u32,
    closed: bool,
}

impl GapState {
    /// A gap whose predicted idle has not been looked up yet.
    pub fn new(
        id: u64,
        owner_client: ClientId,
        owner_task: TaskKey,
        owner_priority: Priority,
        after_kernel: KernelId,
    ) -> GapState {
        GapState {
            id,
            owner_client,
            owner_task,
            owner_priority,
            after_kernel,
            resolved: false,
            predicted_idle: TimeUs::ZERO,
            remaining_idle: TimeUs::ZERO,
            fills_dispatched: 0,
            closed: false,
        }
    }

    /// Resolve the predicted idle from profile data. A missing idle entry
    /// predicts zero: never over-fill on missing data.
    pub fn resolve_with<F>(&mut self, lookup: F)
    where
        F: FnOnce(&TaskKey, &KernelId) -> Option<TimeUs>,
    {
        if self.resolved {
            return;
        }
        let predicted = lookup(&self.owner_task, &self.after_kernel).unwrap_or(TimeUs::ZERO);
        self.predicted_idle = predicted;
        self.remaining_idle = predicted;
        self.resolved = true;
    }

    /// Close the gap: zero the remaining idle and refuse further fills.
    /// Fills already dispatched stay in the device queue.
    pub fn close(&mut self) {
        self.closed = true;
        self.remaining_idle = TimeUs::ZERO;
    }

    /// Dispatch one fill if the gap is open, worth filling, and a fitting
    /// candidate below the owner's priority is waiting.
    pub fn try_fill(
        &mut self,
        queues: &mut PriorityQueues,
        threshold: TimeUs,
    ) -> Option<(KernelRequest, TimeUs)> {
        debug_assert!(self.resolved, "gap prediction must be resolved first");
        if self.closed || self.remaining_idle < threshold {
            return None;
        }
        let floor = self.owner_priority.next_lower()?;
        let (req, exec) = best_prio_fit(queues, self.remaining_idle, floor)?;
        self.remaining_idle = self
            .remaining_idle
            .checked_sub(exec)
            .expect("fit implies exec <= remaining");
        self.fills_dispatched += 1;
        Some((req, exec))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn owner_client(&self) -> ClientId {
        self.owner_client
    }

    pub fn owner_task(&self) -> &TaskKey {
        &self.owner_task
    }

    pub fn owner_priority(&self) -> Priority {
        self.owner_priority
    }

    pub fn after_kernel(&self) -> &KernelId {
        &self.after_kernel
    }

    pub fn predicted_idle(&self) -> TimeUs {
        self.predicted_idle
    }

    pub fn remaining_idle(&self) -> TimeUs {
        self.remaining_idle
    }

    pub fn fills_dispatched(&self) -> u32 {
        self.fills_dispatched
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

/// Greedy gap filling: resolve the gap's predicted idle if needed, then
/// repeatedly take the best priority fit, charging each fill's predicted
/// execution against the remaining idle, until nothing fits or the gap is
/// closed. Returns the fills in dispatch order.
///
/// The event-driven [`Scheduler`] performs exactly this loop, but paced one
/// fill per device idle period so an early-stop signal can cut it short.
pub fn fikit_fill<F>(
    gap: &mut GapState,
    queues: &mut PriorityQueues,
    lookup_idle: F,
    threshold: TimeUs,
) -> Vec<KernelRequest>
where
    F: FnOnce(&TaskKey, &KernelId) -> Option<TimeUs>,
{
    gap.resolve_with(lookup_idle);
    let mut fills = Vec::new();
    while let Some((req, _)) = gap.try_fill(queues, threshold) {
        fills.push(req);
    }
    fills
}

#[derive(Clone, Debug)]
pub struct SchedulerConfig {
    /// Gaps with less remaining idle than this are not filled.
    pub gap_threshold: TimeUs,
    /// Close a gap the moment the owner's next kernel arrives.
    pub feedback: bool,
    /// Scale applied to idle predictions, in thousandths. Unity in
    /// production; experiments raise it to study prediction error.
    pub gap_prediction_scale_milli: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            gap_threshold: GAP_FILL_THRESHOLD,
            feedback: true,
            gap_prediction_scale_milli: 1000,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("client {0} is not registered")]
    UnknownClient(ClientId),
    #[error("client {0} re-registered with a different task or priority")]
    RegistrationConflict(ClientId),
    #[error("requested mode {requested} differs from scheduler mode {actual}")]
    ModeMismatch {
        requested: SchedMode,
        actual: SchedMode,
    },
    #[error("device is exclusively occupied by another task")]
    ExclusiveOccupied,
    #[error("client {client} sent seq {seq}, expected {expected}")]
    SeqOutOfOrder {
        client: ClientId,
        seq: u64,
        expected: u64,
    },
}

#[derive(Clone, Debug)]
struct ClientReg {
    task_key: TaskKey,
    priority: Priority,
    last_seq: u64,
    done: bool,
}

#[derive(Clone, Debug)]
struct HolderState {
    client: ClientId,
}

#[derive(Clone, Debug)]
struct InflightInfo {
    kind: DecisionKind,
    kernel_id: KernelId,
}

/// The central scheduling state machine. One instance per device.
pub struct Scheduler {
    mode: SchedMode,
    cfg: SchedulerConfig,
    queues: PriorityQueues,
    profiles: BTreeMap<TaskKey, Profile>,
    clients: BTreeMap<ClientId, ClientReg>,
    holder: Option<HolderState>,
    gap: Option<GapState>,
    inflight: BTreeMap<(ClientId, u64), InflightInfo>,
    exclusive_owner: Option<ClientId>,
    next_arrival_seq: u64,
    next_gap_id: u64,
}

impl Scheduler {
    pub fn new(mode: SchedMode, cfg: SchedulerConfig) -> Scheduler {
        Scheduler {
            mode,
            cfg,
            queues: PriorityQueues::new(),
            profiles: BTreeMap::new(),
            clients: BTreeMap::new(),
            holder: None,
            gap: None,
            inflight: BTreeMap::new(),
            exclusive_owner: None,
            next_arrival_seq: 0,
            next_gap_id: 0,
        }
    }

    pub fn mode(&self) -> SchedMode {
        self.mode
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    /// Make a task's measurement statistics available for prediction.
    pub fn load_profile(&mut self, profile: Profile) {
        self.profiles.insert(profile.task_key().clone(), profile);
    }

    pub fn has_profile(&self, key: &TaskKey) -> bool {
        self.profiles.contains_key(key)
    }

    /// Register a task instance. Duplicate registrations with identical
    /// identity are idempotent. In exclusive mode the first active task owns
    /// the device and later registrations fail.
    pub fn register(
        &mut self,
        client: ClientId,
        task_key: TaskKey,
        priority: Priority,
        requested_mode: SchedMode,
    ) -> Result<(), SchedulerError> {
        if requested_mode != self.mode {
            return Err(SchedulerError::ModeMismatch {
                requested: requested_mode,
                actual: self.mode,
            });
        }
        if let Some(existing) = self.clients.get(&client) {
            if existing.task_key == task_key && existing.priority == priority {
                return Ok(());
            }
            return Err(SchedulerError::RegistrationConflict(client));
        }
        if self.mode == SchedMode::Exclusive {
            match self.exclusive_owner {
                Some(owner) if owner != client => return Err(SchedulerError::ExclusiveOccupied),
                _ => self.exclusive_owner = Some(client),
            }
        }
        self.clients.insert(
            client,
            ClientReg {
                task_key,
                priority,
                last_seq: 0,
                done: false,
            },
        );
        Ok(())
    }

    pub fn holder_client(&self) -> Option<ClientId> {
        self.holder.as_ref().map(|h| h.client)
    }

    pub fn holder_task(&self) -> Option<&TaskKey> {
        let holder = self.holder.as_ref()?;
        self.clients.get(&holder.client).map(|r| &r.task_key)
    }

    /// The current gap record, if any; it may already be closed.
    pub fn gap(&self) -> Option<&GapState> {
        self.gap.as_ref()
    }

    pub fn queues(&self) -> &PriorityQueues {
        &self.queues
    }

    pub fn inflight_count(&self) -> usize {
        self.inflight.len()
    }

    /// A kernel launch intercepted from a client.
    pub fn on_kernel_launch(
        &mut self,
        client: ClientId,
        kernel_id: KernelId,
        client_seq: u64,
        now: TimeUs,
    ) -> Result<Vec<Dispatch>, SchedulerError> {
        let reg = self
            .clients
            .get_mut(&client)
            .ok_or(SchedulerError::UnknownClient(client))?;
        let expected = reg.last_seq + 1;
        if client_seq != expected {
            return Err(SchedulerError::SeqOutOfOrder {
                client,
                seq: client_seq,
                expected,
            });
        }
        reg.last_seq = client_seq;
        let task_key = reg.task_key.clone();
        let priority = reg.priority;
        let predicted_exec = self
            .profiles
            .get(&task_key)
            .and_then(|p| p.mean_exec(&kernel_id));
        let req = KernelRequest {
            client_id: client,
            task_key,
            kernel_id,
            priority,
            arrival_seq: self.next_arrival_seq,
            client_seq,
            arrived: now,
            predicted_exec,
        };
        self.next_arrival_seq += 1;

        match self.mode {
            SchedMode::DefaultShare => Ok(vec![self.emit(req, DecisionKind::Fifo, None)]),
            SchedMode::Exclusive => {
                if self.exclusive_owner == Some(client) {
                    Ok(vec![self.emit(req, DecisionKind::Holder, None)])
                } else {
                    Err(SchedulerError::ExclusiveOccupied)
                }
            }
            SchedMode::Fikit => {
                // The holder's next launch is the gap-end signal: the true
                // idle just ended, whatever the prediction said.
                if self.cfg.feedback && self.holder_client() == Some(client) {
                    self.close_gap_of(client);
                }
                self.queues.enqueue(req);
                Ok(self.scan_and_dispatch(now))
            }
        }
    }

    /// A kernel completion reported by the device/client.
    pub fn on_kernel_complete(
        &mut self,
        client: ClientId,
        client_seq: u64,
        _measured_exec: TimeUs,
        now: TimeUs,
    ) -> Vec<Dispatch> {
        let Some(info) = self.inflight.remove(&(client, client_seq)) else {
            log::debug!("completion for unknown dispatch {client}/{client_seq}");
            return Vec::new();
        };
        if self.mode != SchedMode::Fikit {
            return Vec::new();
        }
        // A holder kernel's completion opens that task's predicted idle
        // gap. Fill completions instead resume filling the existing gap.
        if info.kind == DecisionKind::Holder && self.holder_client() == Some(client) {
            self.open_gap(client, info.kernel_id);
        }
        self.scan_and_dispatch(now)
    }

    /// The client reports its task finished: release holdership and the
    /// exclusive claim, and let the next task take the device.
    pub fn on_task_done(&mut self, client: ClientId, now: TimeUs) -> Vec<Dispatch> {
        if let Some(reg) = self.clients.get_mut(&client) {
            reg.done = true;
        }
        if self.exclusive_owner == Some(client) {
            self.exclusive_owner = None;
        }
        if self.holder_client() == Some(client) {
            self.close_gap_of(client);
            self.holder = None;
        }
        self.scan_and_dispatch(now)
    }

    /// Early-stop signal for a task's open gap: no further fills may be
    /// dispatched for it. Fills already in the device queue stay there. A
    /// signal with no matching open gap is a no-op.
    pub fn on_gap_end_signal(&mut self, owner_task: &TaskKey, now: TimeUs) -> Vec<Dispatch> {
        if let Some(gap) = self.gap.as_mut() {
            if !gap.closed && gap.owner_task == *owner_task {
                gap.close();
            }
        }
        self.scan_and_dispatch(now)
    }

    fn close_gap_of(&mut self, client: ClientId) {
        if let Some(gap) = self.gap.as_mut() {
            if !gap.closed && gap.owner_client == client {
                gap.close();
            }
        }
    }

    fn open_gap(&mut self, client: ClientId, after_kernel: KernelId) {
        let Some(reg) = self.clients.get(&client) else {
            return;
        };
        let mut gap = GapState::new(
            self.next_gap_id,
            client,
            reg.task_key.clone(),
            reg.priority,
            after_kernel,
        );
        self.next_gap_id += 1;
        let scale = self.cfg.gap_prediction_scale_milli;
        let profiles = &self.profiles;
        gap.resolve_with(|task, kernel| {
            profiles
                .get(task)
                .and_then(|p| p.mean_idle(kernel))
                .map(|t| t.scale_milli(scale))
        });
        // If the owner's next kernel overtook the completion report (possible
        // on a lossy transport), its arrival already marked the true end of
        // this idle period: the gap opens spent.
        if self.cfg.feedback && self.queues.contains_client(client) {
            gap.close();
        }
        self.gap = Some(gap);
    }

    fn emit(&mut self, req: KernelRequest, kind: DecisionKind, gap_id: Option<u64>) -> Dispatch {
        self.inflight.insert(
            (req.client_id, req.client_seq),
            InflightInfo {
                kind,
                kernel_id: req.kernel_id.clone(),
            },
        );
        Dispatch { req, kind, gap_id }
    }

    /// Scan Q0..Q9 and dispatch whatever the mode and gap state allow. In
    /// gap-filling mode all dispatch waits for an idle device; a fill is
    /// chosen only from strictly below the gap owner's priority; a waiting
    /// request that outranks the owner preempts (closing the gap); an
    /// equal-priority request from another task closes the gap and shares
    /// FIFO-style.
    pub fn scan_and_dispatch(&mut self, _now: TimeUs) -> Vec<Dispatch> {
        let mut out = Vec::new();
        if self.mode != SchedMode::Fikit {
            return out;
        }
        loop {
            if !self.inflight.is_empty() {
                break;
            }
            let front = self
                .queues
                .highest_nonempty()
                .and_then(|p| self.queues.front(p))
                .map(|r| (r.priority, r.client_id));

            let open_gap = self.gap.as_mut().filter(|g| !g.closed);
            if let Some(gap) = open_gap {
                let owner_priority = gap.owner_priority;
                let owner_client = gap.owner_client;
                match front {
                    Some((p, _)) if p.outranks(owner_priority) => {
                        // Preemption: a strictly higher-priority kernel is
                        // waiting; the owner no longer holds the device.
                        gap.close();
                        continue;
                    }
                    Some((p, c)) if p == owner_priority && c != owner_client => {
                        // Equal priority shares FIFO-style, like the default
                        // device queue; the gap is not reserved against it.
                        gap.close();
                        continue;
                    }
                    _ => {
                        if let Some((req, _)) = gap.try_fill(&mut self.queues, self.cfg.gap_threshold)
                        {
                            let gap_id = gap.id;
                            let d = self.emit(req, DecisionKind::Fill, Some(gap_id));
                            out.push(d);
                            continue;
                        }
                        // Nothing can fill. Without feedback the gap ends
                        // only when its predicted idle is unusable and the
                        // owner's next kernel is already waiting.
                        if !self.cfg.feedback && self.queues.contains_client(owner_client) {
                            gap.close();
                            continue;
                        }
                        break;
                    }
                }
            } else {
                match front {
                    Some((p, _)) => {
                        let req = self.queues.pop_front(p).expect("front exists");
                        self.holder = Some(HolderState {
                            client: req.client_id,
                        });
                        let d = self.emit(req, DecisionKind::Holder, None);
                        out.push(d);
                        continue;
                    }
                    None => break,
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_model::TimeUs;

    fn key(name: &str) -> TaskKey {
        TaskKey::new(name, Vec::<String>::new()).unwrap()
    }

    fn kid(name: &str) -> KernelId {
        KernelId::new(name, (64, 1, 1), (4, 1, 1)).unwrap()
    }

    fn prio(level: u8) -> Priority {
        Priority::new(level).unwrap()
    }

    /// Profile from (kernel, mean exec, mean idle) triples.
    fn profile(task: &TaskKey, entries: &[(&str, u64, Option<u64>)]) -> Profile {
        Profile::from_parts(
            task.clone(),
            10,
            entries.iter().map(|(name, sk, sg)| {
                (
                    kid(name),
                    TimeUs(*sk),
                    sg.map(TimeUs),
                    if sg.is_some() { 1 } else { 0 },
                )
            }),
        )
    }

    fn fikit_sched() -> Scheduler {
        Scheduler::new(SchedMode::Fikit, SchedulerConfig::default())
    }

    fn req(client: u64, priority: u8, arrival_seq: u64, exec: Option<u64>) -> KernelRequest {
        KernelRequest {
            client_id: ClientId(client),
            task_key: key(&format!("t{client}")),
            kernel_id: kid("k"),
            priority: prio(priority),
            arrival_seq,
            client_seq: arrival_seq + 1,
            arrived: TimeUs::ZERO,
            predicted_exec: exec.map(TimeUs),
        }
    }

    #[test]
    fn uncontended_request_dispatches_immediately() {
        let mut s = fikit_sched();
        let a = ClientId(1);
        s.register(a, key("a"), prio(0), SchedMode::Fikit).unwrap();
        let d = s.on_kernel_launch(a, kid("k1"), 1, TimeUs(0)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DecisionKind::Holder);
        assert_eq!(s.holder_client(), Some(a));
        assert_eq!(s.inflight_count(), 1);
    }

    #[test]
    fn lower_priority_request_fills_open_gap() {
        let mut s = fikit_sched();
        let (a, b) = (ClientId(1), ClientId(2));
        s.load_profile(profile(&key("a"), &[("a1", 5000, Some(10_000))]));
        s.load_profile(profile(&key("b"), &[("b1", 3000, None)]));
        s.register(a, key("a"), prio(0), SchedMode::Fikit).unwrap();
        s.register(b, key("b"), prio(1), SchedMode::Fikit).unwrap();

        s.on_kernel_launch(a, kid("a1"), 1, TimeUs(0)).unwrap();
        let fills = s.on_kernel_complete(a, 1, TimeUs(5000), TimeUs(5000));
        assert!(fills.is_empty(), "no candidates yet");
        let gap = s.gap().unwrap();
        assert_eq!(gap.predicted_idle(), TimeUs(10_000));
        assert!(!gap.is_closed());

        let d = s.on_kernel_launch(b, kid("b1"), 1, TimeUs(6000)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DecisionKind::Fill);
        assert_eq!(d[0].gap_id, Some(s.gap().unwrap().id()));
        assert_eq!(s.gap().unwrap().remaining_idle(), TimeUs(7000));
    }

    #[test]
    fn higher_priority_arrival_preempts_gap_owner() {
        let mut s = fikit_sched();
        let (a, b) = (ClientId(1), ClientId(2));
        s.load_profile(profile(&key("a"), &[("a1", 2000, Some(50_000)), ("a2", 2000, None)]));
        s.load_profile(profile(&key("b"), &[("b1", 4000, Some(30_000))]));
        s.register(a, key("a"), prio(5), SchedMode::Fikit).unwrap();
        s.register(b, key("b"), prio(0), SchedMode::Fikit).unwrap();

        // A runs alone, then idles in a long gap.
        s.on_kernel_launch(a, kid("a1"), 1, TimeUs(0)).unwrap();
        s.on_kernel_complete(a, 1, TimeUs(2000), TimeUs(2000));
        assert!(!s.gap().unwrap().is_closed());

        // B outranks A: the gap closes and B takes the device.
        let d = s.on_kernel_launch(b, kid("b1"), 1, TimeUs(3000)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DecisionKind::Holder);
        assert_eq!(d[0].req.client_id, b);
        assert_eq!(s.holder_client(), Some(b));

        // A's next kernel is withheld while B executes...
        let d = s.on_kernel_launch(a, kid("a2"), 2, TimeUs(4000)).unwrap();
        assert!(d.is_empty());

        // ...and resumes inside B's gap as a fill.
        let d = s.on_kernel_complete(b, 1, TimeUs(4000), TimeUs(7000));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DecisionKind::Fill);
        assert_eq!(d[0].req.client_id, a);
    }

    #[test]
    fn scan_dispatches_lowest_nonempty_level_first() {
        let mut s = fikit_sched();
        let (h, x, y) = (ClientId(1), ClientId(2), ClientId(3));
        s.register(h, key("h"), prio(3), SchedMode::Fikit).unwrap();
        s.register(x, key("x"), prio(5), SchedMode::Fikit).unwrap();
        s.register(y, key("y"), prio(0), SchedMode::Fikit).unwrap();

        s.on_kernel_launch(h, kid("hk"), 1, TimeUs(0)).unwrap();
        assert!(s.on_kernel_launch(x, kid("xk"), 1, TimeUs(10)).unwrap().is_empty());
        assert!(s.on_kernel_launch(y, kid("yk"), 1, TimeUs(20)).unwrap().is_empty());

        // Device frees: Q0 wins over Q5.
        let d = s.on_kernel_complete(h, 1, TimeUs(100), TimeUs(100));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].req.client_id, y);

        // While y holds the device, the strictly-lower x must wait even
        // though y's predicted gap is zero.
        assert!(s.on_kernel_complete(y, 1, TimeUs(100), TimeUs(200)).is_empty());

        // Q5 is served once y relinquishes the device.
        let d = s.on_task_done(y, TimeUs(200));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].req.client_id, x);

        // All queues empty: scan is a no-op.
        assert!(s.on_kernel_complete(x, 1, TimeUs(100), TimeUs(300)).is_empty());
        assert!(s.scan_and_dispatch(TimeUs(400)).is_empty());
    }

    #[test]
    fn best_prio_fit_prefers_higher_level_even_for_looser_fit() {
        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 1, 0, Some(12_000)));
        q.enqueue(req(2, 2, 1, Some(8000)));
        let (r, exec) = best_prio_fit(&mut q, TimeUs(10_000), prio(1)).unwrap();
        assert_eq!(r.client_id, ClientId(2), "level-1 candidate does not fit");
        assert_eq!(exec, TimeUs(8000));
        assert_eq!(q.len(), 1);

        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 1, 0, Some(9000)));
        q.enqueue(req(2, 2, 1, Some(10_000)));
        let (r, _) = best_prio_fit(&mut q, TimeUs(10_000), prio(1)).unwrap();
        assert_eq!(r.client_id, ClientId(1), "higher priority wins despite closer fit below");
    }

    #[test]
    fn best_prio_fit_breaks_ties_by_arrival() {
        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 1, 3, Some(4000)));
        q.enqueue(req(2, 1, 7, Some(4000)));
        let (r, _) = best_prio_fit(&mut q, TimeUs(10_000), prio(1)).unwrap();
        assert_eq!(r.arrival_seq, 3);
    }

    #[test]
    fn best_prio_fit_skips_unpredicted_and_empty() {
        let mut q = PriorityQueues::new();
        assert!(best_prio_fit(&mut q, TimeUs(10_000), prio(0)).is_none());

        q.enqueue(req(1, 1, 0, None));
        q.enqueue(req(2, 1, 1, Some(3000)));
        let (r, _) = best_prio_fit(&mut q, TimeUs(10_000), prio(0)).unwrap();
        assert_eq!(r.client_id, ClientId(2));

        // Floor excludes higher-priority levels entirely.
        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 0, 0, Some(5000)));
        q.enqueue(req(2, 2, 1, Some(4000)));
        let (r, _) = best_prio_fit(&mut q, TimeUs(10_000), prio(1)).unwrap();
        assert_eq!(r.client_id, ClientId(2));
    }

    #[test]
    fn fikit_fill_greedy_loop_examples() {
        let owner = key("owner");
        // Sub-threshold remaining idle: no fills even with candidates.
        let mut gap = GapState::new(0, ClientId(9), owner.clone(), prio(0), kid("k"));
        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 1, 0, Some(40)));
        let fills = fikit_fill(&mut gap, &mut q, |_, _| Some(TimeUs(50)), GAP_FILL_THRESHOLD);
        assert!(fills.is_empty());
        assert_eq!(q.len(), 1);

        // Best fit takes the 9000 and nothing else fits the 1000 left.
        let mut gap = GapState::new(1, ClientId(9), owner.clone(), prio(0), kid("k"));
        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 1, 0, Some(3000)));
        q.enqueue(req(2, 1, 1, Some(6000)));
        q.enqueue(req(3, 1, 2, Some(9000)));
        let fills = fikit_fill(&mut gap, &mut q, |_, _| Some(TimeUs(10_000)), GAP_FILL_THRESHOLD);
        assert_eq!(fills.len(), 1);
        assert_eq!(fills[0].predicted_exec, Some(TimeUs(9000)));
        assert_eq!(gap.remaining_idle(), TimeUs(1000));
        assert_eq!(gap.fills_dispatched(), 1);

        // Missing idle statistic predicts zero: no fill.
        let mut gap = GapState::new(2, ClientId(9), owner, prio(0), kid("k"));
        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 1, 0, Some(100)));
        let fills = fikit_fill(&mut gap, &mut q, |_, _| None, GAP_FILL_THRESHOLD);
        assert!(fills.is_empty());
    }

    #[test]
    fn fikit_fill_packs_multiple_kernels() {
        let mut gap = GapState::new(0, ClientId(9), key("owner"), prio(0), kid("k"));
        let mut q = PriorityQueues::new();
        q.enqueue(req(1, 1, 0, Some(3000)));
        q.enqueue(req(2, 1, 1, Some(6000)));
        let fills = fikit_fill(&mut gap, &mut q, |_, _| Some(TimeUs(10_000)), GAP_FILL_THRESHOLD);
        assert_eq!(fills.len(), 2);
        assert_eq!(fills[0].predicted_exec, Some(TimeUs(6000)));
        assert_eq!(fills[1].predicted_exec, Some(TimeUs(3000)));
        assert_eq!(gap.remaining_idle(), TimeUs(1000));
    }

    #[test]
    fn gap_end_signal_stops_further_fills() {
        let mut s = fikit_sched();
        let (a, b, c) = (ClientId(1), ClientId(2), ClientId(3));
        s.load_profile(profile(&key("a"), &[("a1", 1000, Some(20_000))]));
        s.load_profile(profile(&key("b"), &[("b1", 3000, None)]));
        s.load_profile(profile(&key("c"), &[("c1", 3000, None)]));
        s.register(a, key("a"), prio(0), SchedMode::Fikit).unwrap();
        s.register(b, key("b"), prio(1), SchedMode::Fikit).unwrap();
        s.register(c, key("c"), prio(1), SchedMode::Fikit).unwrap();

        s.on_kernel_launch(a, kid("a1"), 1, TimeUs(0)).unwrap();
        s.on_kernel_complete(a, 1, TimeUs(1000), TimeUs(1000));
        let d = s.on_kernel_launch(b, kid("b1"), 1, TimeUs(1100)).unwrap();
        assert_eq!(d[0].kind, DecisionKind::Fill);
        assert!(s.on_kernel_launch(c, kid("c1"), 1, TimeUs(1200)).unwrap().is_empty());

        // The gap ends early; the paced fill from c must never dispatch as a
        // fill even though 14000us of predicted idle remained.
        let d = s.on_gap_end_signal(&key("a"), TimeUs(2000));
        assert!(d.is_empty());
        assert!(s.gap().unwrap().is_closed());
        assert_eq!(s.gap().unwrap().remaining_idle(), TimeUs::ZERO);

        let d = s.on_kernel_complete(b, 1, TimeUs(3000), TimeUs(4100));
        assert_eq!(d.len(), 1);
        assert_ne!(d[0].kind, DecisionKind::Fill);

        // A signal with no open gap is a no-op.
        assert!(s.on_gap_end_signal(&key("a"), TimeUs(5000)).is_empty());
    }

    #[test]
    fn equal_priority_tasks_share_in_arrival_order() {
        let mut s = fikit_sched();
        let (a, b1, b2) = (ClientId(1), ClientId(2), ClientId(3));
        for (c, name) in [(a, "a"), (b1, "b1"), (b2, "b2")] {
            s.register(c, key(name), prio(1), SchedMode::Fikit).unwrap();
        }
        s.on_kernel_launch(a, kid("ak"), 1, TimeUs(0)).unwrap();
        s.on_kernel_launch(b1, kid("b1k"), 1, TimeUs(10)).unwrap();
        s.on_kernel_launch(b2, kid("b2k"), 1, TimeUs(20)).unwrap();

        let d = s.on_kernel_complete(a, 1, TimeUs(100), TimeUs(100));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].req.client_id, b1, "earlier equal-priority arrival first");
        assert_eq!(d[0].kind, DecisionKind::Holder);

        let d = s.on_kernel_complete(b1, 1, TimeUs(100), TimeUs(200));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].req.client_id, b2);
    }

    #[test]
    fn unprofiled_requests_never_fill_gaps() {
        let mut s = fikit_sched();
        let (a, b) = (ClientId(1), ClientId(2));
        s.load_profile(profile(&key("a"), &[("a1", 1000, Some(50_000))]));
        s.register(a, key("a"), prio(0), SchedMode::Fikit).unwrap();
        s.register(b, key("b"), prio(1), SchedMode::Fikit).unwrap();

        s.on_kernel_launch(a, kid("a1"), 1, TimeUs(0)).unwrap();
        s.on_kernel_complete(a, 1, TimeUs(1000), TimeUs(1000));
        // Huge open gap, but b has no profile: it must wait.
        let d = s.on_kernel_launch(b, kid("b1"), 1, TimeUs(1100)).unwrap();
        assert!(d.is_empty());
        assert_eq!(s.gap().unwrap().remaining_idle(), TimeUs(50_000));
    }

    #[test]
    fn default_share_pipes_in_arrival_order() {
        let mut s = Scheduler::new(SchedMode::DefaultShare, SchedulerConfig::default());
        let (a, b) = (ClientId(1), ClientId(2));
        s.register(a, key("a"), prio(0), SchedMode::DefaultShare).unwrap();
        s.register(b, key("b"), prio(9), SchedMode::DefaultShare).unwrap();
        let d1 = s.on_kernel_launch(b, kid("bk"), 1, TimeUs(0)).unwrap();
        let d2 = s.on_kernel_launch(a, kid("ak"), 1, TimeUs(1)).unwrap();
        assert_eq!(d1[0].kind, DecisionKind::Fifo);
        assert_eq!(d2[0].kind, DecisionKind::Fifo);
        assert_eq!(s.inflight_count(), 2, "default sharing does not pace");
    }

    #[test]
    fn exclusive_mode_rejects_second_task() {
        let mut s = Scheduler::new(SchedMode::Exclusive, SchedulerConfig::default());
        let (a, b) = (ClientId(1), ClientId(2));
        s.register(a, key("a"), prio(0), SchedMode::Exclusive).unwrap();
        assert_eq!(
            s.register(b, key("b"), prio(1), SchedMode::Exclusive),
            Err(SchedulerError::ExclusiveOccupied)
        );
        let d = s.on_kernel_launch(a, kid("ak"), 1, TimeUs(0)).unwrap();
        assert_eq!(d[0].kind, DecisionKind::Holder);
        s.on_kernel_complete(a, 1, TimeUs(10), TimeUs(10));
        s.on_task_done(a, TimeUs(10));
        // Device freed: the next task may now register.
        s.register(b, key("b"), prio(1), SchedMode::Exclusive).unwrap();
    }

    #[test]
    fn registration_and_sequencing_errors() {
        let mut s = fikit_sched();
        let a = ClientId(1);
        assert_eq!(
            s.on_kernel_launch(a, kid("k"), 1, TimeUs(0)),
            Err(SchedulerError::UnknownClient(a))
        );
        assert!(matches!(
            s.register(a, key("a"), prio(0), SchedMode::Exclusive),
            Err(SchedulerError::ModeMismatch { .. })
        ));
        s.register(a, key("a"), prio(0), SchedMode::Fikit).unwrap();
        s.register(a, key("a"), prio(0), SchedMode::Fikit).unwrap(); // idempotent
        assert_eq!(
            s.register(a, key("a"), prio(1), SchedMode::Fikit),
            Err(SchedulerError::RegistrationConflict(a))
        );
        assert_eq!(
            s.on_kernel_launch(a, kid("k"), 2, TimeUs(0)),
            Err(SchedulerError::SeqOutOfOrder {
                client: a,
                seq: 2,
                expected: 1
            })
        );
    }

    #[test]
    fn feedback_off_keeps_filling_past_owner_arrival() {
        let cfg = SchedulerConfig {
            feedback: false,
            ..SchedulerConfig::default()
        };
        let mut s = Scheduler::new(SchedMode::Fikit, cfg);
        let (a, b) = (ClientId(1), ClientId(2));
        s.load_profile(profile(&key("a"), &[("a1", 1000, Some(10_000)), ("a2", 1000, None)]));
        s.load_profile(profile(&key("b"), &[("b1", 4000, None)]));
        s.register(a, key("a"), prio(0), SchedMode::Fikit).unwrap();
        s.register(b, key("b"), prio(1), SchedMode::Fikit).unwrap();

        s.on_kernel_launch(a, kid("a1"), 1, TimeUs(0)).unwrap();
        s.on_kernel_complete(a, 1, TimeUs(1000), TimeUs(1000));
        let d = s.on_kernel_launch(b, kid("b1"), 1, TimeUs(1100)).unwrap();
        assert_eq!(d[0].kind, DecisionKind::Fill);

        // Owner's next kernel arrives early; without feedback it waits.
        let d = s.on_kernel_launch(a, kid("a2"), 2, TimeUs(1500)).unwrap();
        assert!(d.is_empty());
        assert!(!s.gap().unwrap().is_closed());

        // The fill completes; remaining predicted idle (6000) fits nothing,
        // so the gap exhausts and the owner finally dispatches.
        let d = s.on_kernel_complete(b, 1, TimeUs(4000), TimeUs(5100));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].req.client_id, a);
        assert_eq!(d[0].kind, DecisionKind::Holder);
    }
}
