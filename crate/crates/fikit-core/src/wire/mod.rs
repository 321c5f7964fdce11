//! Datagram control protocol between hook clients and the central
//! scheduler, mirroring the distributed client/server deployment.
//!
//! The protocol cores are sans-io state machines: [`ServerCore`] funnels
//! decoded datagrams from any number of clients into the single scheduler
//! event loop and emits reply datagrams plus dispatch decisions;
//! [`ClientCore`] drives one client's serial request/acknowledge cycle.
//! Both are shared by the real UDP endpoints and by a deterministic
//! virtual-time co-simulation whose in-memory channel injects seeded loss,
//! duplication, and jitter.
//!
//! Reliability: the client retransmits each message (same message id) until
//! the scheduler's answer arrives; the scheduler deduplicates by client and
//! sequence number and re-sends its original answer for duplicates, so a
//! kernel is dispatched exactly once no matter how the transport misbehaves.

pub mod codec;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::device_sim::{
    DecisionLog, DecisionRecord, JctReport, RunRecord, RunStatus, SimConfig, SimError, SimOutcome,
    SimTask,
};
use crate::kernel_model::{KernelId, Priority, TaskKey, TimeUs};
use crate::profiler::Profile;
use crate::scheduler::{
    ClientId, DecisionKind, Dispatch, SchedMode, Scheduler, SchedulerError,
};
use codec::{decode, encode, error_code, Envelope, Header, Message};

/// Sender id used by the scheduler side in datagram headers.
pub const SERVER_SENDER_ID: u64 = 0;

/// Where a server reply datagram should go.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplyTo {
    /// Back to whatever endpoint sent the datagram being answered.
    Sender,
    /// To a specific client (grants may target clients other than the
    /// sender whose event unblocked them).
    Client(ClientId),
}

/// Result of feeding one datagram to the server core.
#[derive(Debug, Default)]
pub struct ServerOutput {
    pub replies: Vec<(ReplyTo, Vec<u8>)>,
    /// Dispatch decisions made while processing the datagram, for decision
    /// logging by the host.
    pub dispatches: Vec<Dispatch>,
}

#[derive(Debug, Default)]
struct ServerSession {
    last_launch: u64,
    granted: BTreeMap<u64, DecisionKind>,
    completed: BTreeSet<u64>,
    done: bool,
}

/// The scheduler wrapped in protocol framing and idempotency bookkeeping.
pub struct ServerCore {
    scheduler: Scheduler,
    sessions: BTreeMap<ClientId, ServerSession>,
    next_msg_id: u64,
}

impl ServerCore {
    pub fn new(scheduler: Scheduler) -> ServerCore {
        ServerCore {
            scheduler,
            sessions: BTreeMap::new(),
            next_msg_id: 1,
        }
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    fn envelope(&mut self, msg: Message) -> Vec<u8> {
        let env = Envelope {
            header: Header {
                msg_id: self.next_msg_id,
                sender: SERVER_SENDER_ID,
            },
            msg,
        };
        self.next_msg_id += 1;
        encode(&env).expect("server replies fit one datagram")
    }

    fn error_reply(&mut self, out: &mut ServerOutput, code: u16, detail: impl Into<String>) {
        let bytes = self.envelope(Message::Error {
            code,
            detail: detail.into(),
        });
        out.replies.push((ReplyTo::Sender, bytes));
    }

    fn grant_dispatches(&mut self, dispatches: Vec<Dispatch>, out: &mut ServerOutput) {
        for d in dispatches {
            let client = d.req.client_id;
            let seq = d.req.client_seq;
            self.sessions
                .entry(client)
                .or_default()
                .granted
                .insert(seq, d.kind);
            let bytes = self.envelope(Message::ScheduleGrant {
                client,
                seq,
                kind: d.kind,
            });
            out.replies.push((ReplyTo::Client(client), bytes));
            out.dispatches.push(d);
        }
    }

    /// Feed one raw datagram. Undecodable input is dropped (logged), never
    /// answered.
    pub fn on_datagram(&mut self, now: TimeUs, bytes: &[u8]) -> ServerOutput {
        match decode(bytes) {
            Ok(env) => self.on_envelope(now, env),
            Err(e) => {
                log::debug!("dropping undecodable datagram: {e}");
                ServerOutput::default()
            }
        }
    }

    /// Feed one decoded envelope.
    pub fn on_envelope(&mut self, now: TimeUs, env: Envelope) -> ServerOutput {
        let mut out = ServerOutput::default();
        let sender = ClientId(env.header.sender);
        match env.msg {
            Message::Register {
                task_key,
                priority,
                mode,
            } => self.handle_register(now, sender, task_key, priority, mode, &mut out),
            Message::KernelLaunch {
                client,
                kernel_id,
                seq,
            } => {
                if client != sender {
                    log::debug!("launch client field {client} != sender {sender}; dropped");
                } else {
                    self.handle_launch(now, client, kernel_id, seq, &mut out);
                }
            }
            Message::KernelComplete {
                client,
                seq,
                exec_time,
            } => {
                if client == sender {
                    self.handle_complete(now, client, seq, exec_time, &mut out);
                }
            }
            Message::TaskDone { client } => {
                if client == sender {
                    self.handle_done(now, client, &mut out);
                }
            }
            Message::ScheduleGrant { .. } | Message::Error { .. } => {
                log::debug!("server ignoring client-bound message kind");
            }
        }
        out
    }

    fn handle_register(
        &mut self,
        _now: TimeUs,
        client: ClientId,
        task_key: TaskKey,
        priority: Priority,
        mode: SchedMode,
        out: &mut ServerOutput,
    ) {
        match self
            .scheduler
            .register(client, task_key.clone(), priority, mode)
        {
            Ok(()) => {
                self.sessions.entry(client).or_default();
                let bytes = self.envelope(Message::Register {
                    task_key,
                    priority,
                    mode,
                });
                out.replies.push((ReplyTo::Sender, bytes));
            }
            Err(SchedulerError::ModeMismatch { .. }) => {
                self.error_reply(out, error_code::MODE_MISMATCH, "scheduler mode differs")
            }
            Err(SchedulerError::ExclusiveOccupied) => {
                self.error_reply(out, error_code::OCCUPIED, "device exclusively occupied")
            }
            Err(SchedulerError::RegistrationConflict(_)) => self.error_reply(
                out,
                error_code::REGISTRATION_CONFLICT,
                "conflicting registration",
            ),
            Err(e) => self.error_reply(out, error_code::REGISTRATION_CONFLICT, e.to_string()),
        }
    }

    fn handle_launch(
        &mut self,
        now: TimeUs,
        client: ClientId,
        kernel_id: KernelId,
        seq: u64,
        out: &mut ServerOutput,
    ) {
        let Some(session) = self.sessions.get_mut(&client) else {
            self.error_reply(out, error_code::UNKNOWN_CLIENT, "register first");
            return;
        };
        if let Some(kind) = session.granted.get(&seq).copied() {
            // Duplicate of an already-granted launch: re-send the grant.
            let bytes = self.envelope(Message::ScheduleGrant { client, seq, kind });
            out.replies.push((ReplyTo::Sender, bytes));
            return;
        }
        if seq <= session.last_launch {
            // Duplicate of a still-pending launch: the grant will go out
            // when the scheduler dispatches it.
            return;
        }
        if seq != session.last_launch + 1 {
            self.error_reply(out, error_code::BAD_SEQUENCE, "sequence gap");
            return;
        }
        session.last_launch = seq;
        match self.scheduler.on_kernel_launch(client, kernel_id, seq, now) {
            Ok(dispatches) => self.grant_dispatches(dispatches, out),
            Err(SchedulerError::ExclusiveOccupied) => {
                self.error_reply(out, error_code::OCCUPIED, "device exclusively occupied")
            }
            Err(e) => self.error_reply(out, error_code::BAD_SEQUENCE, e.to_string()),
        }
    }

    fn handle_complete(
        &mut self,
        now: TimeUs,
        client: ClientId,
        seq: u64,
        exec_time: TimeUs,
        out: &mut ServerOutput,
    ) {
        let Some(session) = self.sessions.get_mut(&client) else {
            return;
        };
        let first_time = session.completed.insert(seq);
        // Acknowledge by echo either way; drive the scheduler only once.
        let bytes = self.envelope(Message::KernelComplete {
            client,
            seq,
            exec_time,
        });
        out.replies.push((ReplyTo::Sender, bytes));
        if first_time {
            let dispatches = self.scheduler.on_kernel_complete(client, seq, exec_time, now);
            self.grant_dispatches(dispatches, out);
        }
    }

    fn handle_done(&mut self, now: TimeUs, client: ClientId, out: &mut ServerOutput) {
        let Some(session) = self.sessions.get_mut(&client) else {
            return;
        };
        let first_time = !session.done;
        session.done = true;
        let bytes = self.envelope(Message::TaskDone { client });
        out.replies.push((ReplyTo::Sender, bytes));
        if first_time {
            let dispatches = self.scheduler.on_task_done(client, now);
            self.grant_dispatches(dispatches, out);
        }
    }
}

/// What a client is waiting for.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Expect {
    RegisterAck,
    Grant(u64),
    CompleteAck(u64),
    DoneAck,
}

/// Outcome of one client operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpOutcome {
    Registered,
    Granted(DecisionKind),
    CompleteAcked,
    DoneAcked,
    Rejected { code: u16, detail: String },
}

/// Sans-io client state machine for the blocking session: one operation in
/// flight at a time, retransmitted verbatim until answered.
pub struct ClientCore {
    client: ClientId,
    next_msg_id: u64,
    pending: Option<(Vec<u8>, Expect)>,
}

impl ClientCore {
    pub fn new(client: ClientId) -> ClientCore {
        ClientCore {
            client,
            next_msg_id: 1,
            pending: None,
        }
    }

    pub fn client(&self) -> ClientId {
        self.client
    }

    fn start(&mut self, msg: Message, expect: Expect) -> Vec<u8> {
        debug_assert!(self.pending.is_none(), "one operation in flight at a time");
        let env = Envelope {
            header: Header {
                msg_id: self.next_msg_id,
                sender: self.client.0,
            },
            msg,
        };
        self.next_msg_id += 1;
        let bytes = encode(&env).expect("client messages fit one datagram");
        self.pending = Some((bytes.clone(), expect));
        bytes
    }

    pub fn start_register(
        &mut self,
        task_key: TaskKey,
        priority: Priority,
        mode: SchedMode,
    ) -> Vec<u8> {
        self.start(
            Message::Register {
                task_key,
                priority,
                mode,
            },
            Expect::RegisterAck,
        )
    }

    pub fn start_launch(&mut self, kernel_id: KernelId, seq: u64) -> Vec<u8> {
        self.start(
            Message::KernelLaunch {
                client: self.client,
                kernel_id,
                seq,
            },
            Expect::Grant(seq),
        )
    }

    pub fn start_complete(&mut self, seq: u64, exec_time: TimeUs) -> Vec<u8> {
        self.start(
            Message::KernelComplete {
                client: self.client,
                seq,
                exec_time,
            },
            Expect::CompleteAck(seq),
        )
    }

    pub fn start_done(&mut self) -> Vec<u8> {
        self.start(Message::TaskDone { client: self.client }, Expect::DoneAck)
    }

    /// The datagram to retransmit, while an operation is pending.
    pub fn pending_datagram(&self) -> Option<&[u8]> {
        self.pending.as_ref().map(|(b, _)| b.as_slice())
    }

    /// Feed a datagram from the scheduler. Returns the outcome if it
    /// answers the pending operation; stale or duplicate input is ignored.
    pub fn on_datagram(&mut self, bytes: &[u8]) -> Option<OpOutcome> {
        let env = decode(bytes).ok()?;
        let (_, expect) = self.pending.as_ref()?;
        let outcome = match (&env.msg, expect) {
            (Message::Register { .. }, Expect::RegisterAck) => OpOutcome::Registered,
            (Message::ScheduleGrant { client, seq, kind }, Expect::Grant(want))
                if *client == self.client && seq == want =>
            {
                OpOutcome::Granted(*kind)
            }
            (Message::KernelComplete { client, seq, .. }, Expect::CompleteAck(want))
                if *client == self.client && seq == want =>
            {
                OpOutcome::CompleteAcked
            }
            (Message::TaskDone { client }, Expect::DoneAck) if *client == self.client => {
                OpOutcome::DoneAcked
            }
            (Message::Error { code, detail }, _) => OpOutcome::Rejected {
                code: *code,
                detail: detail.clone(),
            },
            _ => return None,
        };
        self.pending = None;
        Some(outcome)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("no answer after {attempts} attempts")]
    RetriesExhausted { attempts: u32 },
    #[error("scheduler rejected the request (code {code}): {detail}")]
    Rejected { code: u16, detail: String },
    #[error("unexpected outcome for this operation")]
    ProtocolMismatch,
}

#[derive(Clone, Copy, Debug)]
pub struct SessionConfig {
    /// Retransmit an unanswered request after this long.
    pub rto: Duration,
    /// Give up after this many retransmissions.
    pub retry_budget: u32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            rto: Duration::from_millis(100),
            retry_budget: 50,
        }
    }
}

/// Blocking client session over real UDP sockets. Each call sends one
/// request and blocks until the scheduler answers, retransmitting with the
/// same message id on timeout.
pub struct ClientSession {
    socket: UdpSocket,
    core: ClientCore,
    cfg: SessionConfig,
}

impl ClientSession {
    pub fn connect(
        server: impl ToSocketAddrs,
        client: ClientId,
        cfg: SessionConfig,
    ) -> io::Result<ClientSession> {
        let socket = UdpSocket::bind(("0.0.0.0", 0))?;
        socket.connect(server)?;
        Ok(ClientSession {
            socket,
            core: ClientCore::new(client),
            cfg,
        })
    }

    fn roundtrip(&mut self, first: Vec<u8>) -> Result<OpOutcome, SessionError> {
        self.socket.send(&first)?;
        let mut buf = [0u8; codec::MAX_DATAGRAM_LEN];
        let mut attempts = 0u32;
        loop {
            let deadline = Instant::now() + self.cfg.rto;
            loop {
                let remaining = deadline.saturating_duration_since(Instant::now());
                if remaining.is_zero() {
                    break;
                }
                self.socket.set_read_timeout(Some(remaining))?;
                match self.socket.recv(&mut buf) {
                    Ok(n) => {
                        if let Some(outcome) = self.core.on_datagram(&buf[..n]) {
                            return Ok(outcome);
                        }
                    }
                    Err(e)
                        if e.kind() == io::ErrorKind::WouldBlock
                            || e.kind() == io::ErrorKind::TimedOut =>
                    {
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            attempts += 1;
            if attempts > self.cfg.retry_budget {
                return Err(SessionError::RetriesExhausted { attempts });
            }
            let dg = self
                .core
                .pending_datagram()
                .expect("pending op retransmits")
                .to_vec();
            self.socket.send(&dg)?;
        }
    }

    pub fn register(
        &mut self,
        task_key: TaskKey,
        priority: Priority,
        mode: SchedMode,
    ) -> Result<(), SessionError> {
        let dg = self.core.start_register(task_key, priority, mode);
        match self.roundtrip(dg)? {
            OpOutcome::Registered => Ok(()),
            OpOutcome::Rejected { code, detail } => Err(SessionError::Rejected { code, detail }),
            _ => Err(SessionError::ProtocolMismatch),
        }
    }

    /// Block until the scheduler grants this kernel.
    pub fn launch(&mut self, kernel_id: KernelId, seq: u64) -> Result<DecisionKind, SessionError> {
        let dg = self.core.start_launch(kernel_id, seq);
        match self.roundtrip(dg)? {
            OpOutcome::Granted(kind) => Ok(kind),
            OpOutcome::Rejected { code, detail } => Err(SessionError::Rejected { code, detail }),
            _ => Err(SessionError::ProtocolMismatch),
        }
    }

    pub fn complete(&mut self, seq: u64, exec_time: TimeUs) -> Result<(), SessionError> {
        let dg = self.core.start_complete(seq, exec_time);
        match self.roundtrip(dg)? {
            OpOutcome::CompleteAcked => Ok(()),
            OpOutcome::Rejected { code, detail } => Err(SessionError::Rejected { code, detail }),
            _ => Err(SessionError::ProtocolMismatch),
        }
    }

    pub fn done(&mut self) -> Result<(), SessionError> {
        let dg = self.core.start_done();
        match self.roundtrip(dg)? {
            OpOutcome::DoneAcked => Ok(()),
            OpOutcome::Rejected { code, detail } => Err(SessionError::Rejected { code, detail }),
            _ => Err(SessionError::ProtocolMismatch),
        }
    }
}

/// Blocking UDP scheduler server: decodes datagrams, drives the scheduler,
/// sends grants and acknowledgements. Single-threaded by design — the
/// datagram socket is the serialization point for all clients.
pub struct UdpScheduler {
    socket: UdpSocket,
    core: ServerCore,
    addrs: BTreeMap<ClientId, SocketAddr>,
    epoch: Instant,
    dispatch_count: u64,
}

impl UdpScheduler {
    pub fn bind(addr: impl ToSocketAddrs, scheduler: Scheduler) -> io::Result<UdpScheduler> {
        let socket = UdpSocket::bind(addr)?;
        Ok(UdpScheduler {
            socket,
            core: ServerCore::new(scheduler),
            addrs: BTreeMap::new(),
            epoch: Instant::now(),
            dispatch_count: 0,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn dispatch_count(&self) -> u64 {
        self.dispatch_count
    }

    fn now(&self) -> TimeUs {
        TimeUs(self.epoch.elapsed().as_micros() as u64)
    }

    /// Receive and handle at most one datagram, waiting up to `timeout`.
    /// Returns whether a datagram was handled.
    pub fn pump_once(&mut self, timeout: Duration) -> io::Result<bool> {
        self.socket.set_read_timeout(Some(timeout))?;
        let mut buf = [0u8; codec::MAX_DATAGRAM_LEN];
        let (n, src) = match self.socket.recv_from(&mut buf) {
            Ok(v) => v,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock
                    || e.kind() == io::ErrorKind::TimedOut =>
            {
                return Ok(false)
            }
            Err(e) => return Err(e),
        };
        let Ok(env) = decode(&buf[..n]) else {
            log::debug!("dropping undecodable datagram from {src}");
            return Ok(true);
        };
        if env.header.sender != SERVER_SENDER_ID {
            self.addrs.insert(ClientId(env.header.sender), src);
        }
        let now = self.now();
        let out = self.core.on_envelope(now, env);
        for d in &out.dispatches {
            self.dispatch_count += 1;
            log::info!(
                "dispatch {} {} seq {} kind {}",
                d.req.task_key.canonical(),
                d.req.kernel_id,
                d.req.client_seq,
                d.kind
            );
        }
        for (to, bytes) in out.replies {
            let dest = match to {
                ReplyTo::Sender => Some(src),
                ReplyTo::Client(c) => self.addrs.get(&c).copied(),
            };
            match dest {
                Some(addr) => {
                    let _ = self.socket.send_to(&bytes, addr);
                }
                None => log::warn!("no address known for grant target"),
            }
        }
        Ok(true)
    }

    /// Serve until `shutdown` is set.
    pub fn serve(&mut self, shutdown: &AtomicBool) -> io::Result<()> {
        while !shutdown.load(AtomicOrdering::Relaxed) {
            self.pump_once(Duration::from_millis(50))?;
        }
        Ok(())
    }
}

/// In-memory channel behavior for the virtual-time co-simulation.
#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Probability (in millionths) of dropping each datagram.
    pub loss_ppm: u32,
    /// Probability (in millionths) of delivering each datagram twice.
    pub duplicate_ppm: u32,
    /// Extra uniform delivery delay in `0..=jitter` microseconds; nonzero
    /// values can reorder datagrams.
    pub jitter: TimeUs,
    /// Base one-way delivery latency.
    pub base_latency: TimeUs,
    /// Virtual retransmit timeout.
    pub rto: TimeUs,
    /// Retransmissions per message before the client gives up.
    pub retry_budget: u32,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            loss_ppm: 0,
            duplicate_ppm: 0,
            jitter: TimeUs::ZERO,
            base_latency: TimeUs::ZERO,
            rto: TimeUs(200),
            retry_budget: 200,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// A lossy channel dropping the given fraction of datagrams.
    pub fn lossy(loss: f64, seed: u64) -> NetConfig {
        NetConfig {
            loss_ppm: (loss * 1_000_000.0).round() as u32,
            seed,
            ..NetConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Endpoint {
    Server,
    Client(ClientId),
}

// Tie ranks mirror the direct simulator: device completions first, then
// think-timer expiry, then datagram deliveries, then device starts, then
// retransmission checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum WireKind {
    DevEnd,
    Think,
    Activate,
    Deliver,
    DevStart,
    Retx,
}

#[derive(Debug)]
enum WirePayload {
    Activate { idx: usize },
    Deliver { from: Endpoint, to: Endpoint, bytes: Vec<u8> },
    DevStart { client: ClientId, seq: u64 },
    DevEnd { client: ClientId, seq: u64 },
    Think { client: ClientId, seq: u64 },
    Retx { client: ClientId, msg_id: u64 },
}

struct WireScheduled {
    time: TimeUs,
    kind: WireKind,
    id: u64,
    payload: WirePayload,
}

impl PartialEq for WireScheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for WireScheduled {}

impl PartialOrd for WireScheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for WireScheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.kind, other.id).cmp(&(self.time, self.kind, self.id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WireClientStatus {
    Pending,
    Running,
    Done,
    Failed,
}

struct Outstanding {
    bytes: Vec<u8>,
    expect: Expect,
    retries_left: u32,
}

struct WireClient {
    client: ClientId,
    task: SimTask,
    status: WireClientStatus,
    next_msg_id: u64,
    outstanding: BTreeMap<u64, Outstanding>,
    /// Highest kernel seq already submitted to the device (grant dedup).
    submitted: u64,
    cur_run: u32,
    run_issued: TimeUs,
}

impl WireClient {
    fn kernels_per_run(&self) -> u64 {
        self.task.script.invocations.len() as u64
    }

    fn pos_for_seq(&self, seq: u64) -> usize {
        ((seq - 1) % self.kernels_per_run()) as usize
    }

    fn invocation(&self, seq: u64) -> &crate::kernel_model::KernelInvocation {
        &self.task.script.invocations[self.pos_for_seq(seq)]
    }

    fn is_last_in_run(&self, seq: u64) -> bool {
        self.pos_for_seq(seq) + 1 == self.kernels_per_run() as usize
    }
}

struct DeviceSlot {
    client: ClientId,
    seq: u64,
    exec: TimeUs,
    rec: usize,
}

struct WireEngine {
    heap: BinaryHeap<WireScheduled>,
    next_event_id: u64,
    rng: ChaCha8Rng,
    net: NetConfig,
    sim: SimConfig,
    server: ServerCore,
    clients: Vec<WireClient>,
    device: VecDeque<DeviceSlot>,
    device_busy: bool,
    records: Vec<DecisionRecord>,
    rec_index: BTreeMap<(ClientId, u64), usize>,
    run_records: Vec<RunRecord>,
    mode: SchedMode,
}

impl WireEngine {
    fn push(&mut self, time: TimeUs, kind: WireKind, payload: WirePayload) {
        self.heap.push(WireScheduled {
            time,
            kind,
            id: self.next_event_id,
            payload,
        });
        self.next_event_id += 1;
    }

    fn client_mut(&mut self, id: ClientId) -> &mut WireClient {
        &mut self.clients[id.0 as usize - 1]
    }

    /// Send a datagram through the lossy channel.
    fn transmit(&mut self, now: TimeUs, from: Endpoint, to: Endpoint, bytes: Vec<u8>) {
        let lost = self.rng.random_range(0..1_000_000u32) < self.net.loss_ppm;
        let duplicated = self.rng.random_range(0..1_000_000u32) < self.net.duplicate_ppm;
        let jitter = |rng: &mut ChaCha8Rng, j: TimeUs| {
            if j.is_zero() {
                TimeUs::ZERO
            } else {
                TimeUs(rng.random_range(0..=j.as_u64()))
            }
        };
        if !lost {
            let delay = self.net.base_latency + jitter(&mut self.rng, self.net.jitter);
            let copy = bytes.clone();
            self.push(
                now + delay,
                WireKind::Deliver,
                WirePayload::Deliver {
                    from,
                    to,
                    bytes: copy,
                },
            );
        }
        if duplicated {
            let delay = self.net.base_latency + jitter(&mut self.rng, self.net.jitter);
            self.push(
                now + delay,
                WireKind::Deliver,
                WirePayload::Deliver { from, to, bytes },
            );
        }
    }

    /// Client sends a message it will retransmit until answered.
    fn send_reliable(&mut self, now: TimeUs, client: ClientId, msg: Message, expect: Expect) {
        let state = self.client_mut(client);
        let msg_id = state.next_msg_id;
        state.next_msg_id += 1;
        let env = Envelope {
            header: Header {
                msg_id,
                sender: client.0,
            },
            msg,
        };
        let bytes = encode(&env).expect("client messages fit one datagram");
        let budget = self.net.retry_budget;
        self.client_mut(client).outstanding.insert(
            msg_id,
            Outstanding {
                bytes: bytes.clone(),
                expect,
                retries_left: budget,
            },
        );
        self.transmit(now, Endpoint::Client(client), Endpoint::Server, bytes);
        self.push(
            now + self.net.rto,
            WireKind::Retx,
            WirePayload::Retx { client, msg_id },
        );
    }

    fn send_launch(&mut self, now: TimeUs, client: ClientId, seq: u64) {
        let kernel_id = self.client_mut(client).invocation(seq).kernel_id.clone();
        self.send_reliable(
            now,
            client,
            Message::KernelLaunch {
                client,
                kernel_id,
                seq,
            },
            Expect::Grant(seq),
        );
    }

    fn on_activate(&mut self, now: TimeUs, idx: usize) {
        let state = &mut self.clients[idx];
        state.status = WireClientStatus::Running;
        let (client, key, prio) = (
            state.client,
            state.task.task_key.clone(),
            state.task.priority,
        );
        let mode = self.mode;
        self.send_reliable(
            now,
            client,
            Message::Register {
                task_key: key,
                priority: prio,
                mode,
            },
            Expect::RegisterAck,
        );
    }

    fn submit_to_device(&mut self, now: TimeUs, client: ClientId, seq: u64) {
        let exec = self.client_mut(client).invocation(seq).exec_time;
        let rec = match self.rec_index.get(&(client, seq)) {
            Some(&rec) => rec,
            None => {
                log::warn!("grant for unknown dispatch record {client}/{seq}");
                return;
            }
        };
        self.device.push_back(DeviceSlot {
            client,
            seq,
            exec,
            rec,
        });
        if !self.device_busy {
            self.device_busy = true;
            self.push(now, WireKind::DevStart, WirePayload::DevStart { client, seq });
        }
    }

    fn on_client_datagram(&mut self, now: TimeUs, client: ClientId, bytes: &[u8]) {
        let Ok(env) = decode(bytes) else { return };
        let state = self.client_mut(client);
        // Resolve which outstanding message, if any, this answers.
        let answered = state.outstanding.iter().find_map(|(&id, o)| {
            let hit = match (&env.msg, &o.expect) {
                (Message::Register { .. }, Expect::RegisterAck) => true,
                (Message::ScheduleGrant { client: c, seq, .. }, Expect::Grant(want)) => {
                    c == &client && seq == want
                }
                (Message::KernelComplete { client: c, seq, .. }, Expect::CompleteAck(want)) => {
                    c == &client && seq == want
                }
                (Message::TaskDone { client: c }, Expect::DoneAck) => c == &client,
                (Message::Error { .. }, _) => true,
                _ => false,
            };
            hit.then_some(id)
        });
        if let Some(id) = answered {
            state.outstanding.remove(&id);
        }
        match env.msg {
            Message::Register { .. } => {
                if answered.is_some() {
                    // Registered: request the first kernel.
                    self.send_launch(now, client, 1);
                }
            }
            Message::ScheduleGrant { seq, .. } => {
                let state = self.client_mut(client);
                if seq == state.submitted + 1 {
                    state.submitted = seq;
                    self.submit_to_device(now, client, seq);
                }
                // seq <= submitted is a duplicate re-grant: ignored.
            }
            Message::KernelComplete { .. } | Message::TaskDone { .. } => {
                if answered.is_some() && matches!(env.msg, Message::TaskDone { .. }) {
                    self.client_mut(client).status = WireClientStatus::Done;
                }
            }
            Message::Error { code, detail } => {
                let state = self.client_mut(client);
                let was_pending = state.status == WireClientStatus::Running && state.submitted == 0;
                state.status = WireClientStatus::Failed;
                state.outstanding.clear();
                if was_pending {
                    let (task_key, issued) = (state.task.task_key.clone(), state.task.issue_time);
                    self.run_records.push(RunRecord {
                        client,
                        task_key,
                        run_ord: 1,
                        issued,
                        ended: issued,
                        jct: TimeUs::ZERO,
                        status: RunStatus::FailedToStart,
                    });
                }
                log::debug!("client {client} rejected (code {code}): {detail}");
            }
            Message::KernelLaunch { .. } => {}
        }
    }

    fn on_server_datagram(&mut self, now: TimeUs, from: Endpoint, bytes: &[u8]) {
        let out = self.server.on_datagram(now, bytes);
        for d in &out.dispatches {
            let rec = self.records.len();
            self.records.push(DecisionRecord {
                requested: d.req.arrived,
                dispatched: now,
                started: TimeUs::ZERO,
                ended: TimeUs::ZERO,
                client: d.req.client_id,
                seq: d.req.client_seq,
                task_key: d.req.task_key.clone(),
                kernel_id: d.req.kernel_id.clone(),
                kind: d.kind,
                gap_id: d.gap_id,
            });
            self.rec_index.insert((d.req.client_id, d.req.client_seq), rec);
        }
        for (to, bytes) in out.replies {
            let dest = match to {
                ReplyTo::Sender => from,
                ReplyTo::Client(c) => Endpoint::Client(c),
            };
            self.transmit(now, Endpoint::Server, dest, bytes);
        }
    }

    fn on_dev_start(&mut self, now: TimeUs, client: ClientId, seq: u64) {
        let front = self.device.front().expect("start implies queued kernel");
        debug_assert_eq!((front.client, front.seq), (client, seq));
        let (rec, exec) = (front.rec, front.exec);
        self.records[rec].started = now;
        self.push(
            now + exec,
            WireKind::DevEnd,
            WirePayload::DevEnd { client, seq },
        );
    }

    fn on_dev_end(&mut self, now: TimeUs, client: ClientId, seq: u64) {
        let slot = self.device.pop_front().expect("ending kernel was queued");
        debug_assert_eq!((slot.client, slot.seq), (client, seq));
        self.records[slot.rec].ended = now;
        if let Some(next) = self.device.front() {
            let (c, s) = (next.client, next.seq);
            self.push(now, WireKind::DevStart, WirePayload::DevStart { client: c, seq: s });
        } else {
            self.device_busy = false;
        }

        // Report the completion to the scheduler (reliable, in the
        // background) and continue the client's replay.
        self.send_reliable(
            now,
            client,
            Message::KernelComplete {
                client,
                seq,
                exec_time: slot.exec,
            },
            Expect::CompleteAck(seq),
        );

        let state = self.client_mut(client);
        if !state.is_last_in_run(seq) {
            let think = state
                .invocation(seq)
                .idle_after
                .expect("non-final kernel has a gap");
            self.push(
                now + think,
                WireKind::Think,
                WirePayload::Think {
                    client,
                    seq: seq + 1,
                },
            );
            return;
        }

        let run_ord = state.cur_run + 1;
        let issued = state.run_issued;
        let task_key = state.task.task_key.clone();
        state.cur_run = run_ord;
        let more_runs = state.cur_run < state.task.repeat_count;
        let inter_run = self.sim.inter_run_gap;
        self.run_records.push(RunRecord {
            client,
            task_key,
            run_ord,
            issued,
            ended: now,
            jct: now.checked_sub(issued).expect("run ends after issue"),
            status: RunStatus::Completed,
        });
        if more_runs {
            let state = self.client_mut(client);
            state.run_issued = now + inter_run;
            self.push(
                now + inter_run,
                WireKind::Think,
                WirePayload::Think {
                    client,
                    seq: seq + 1,
                },
            );
        } else {
            self.send_reliable(now, client, Message::TaskDone { client }, Expect::DoneAck);
        }
    }

    fn on_retx(&mut self, now: TimeUs, client: ClientId, msg_id: u64) -> Result<(), SimError> {
        let state = self.client_mut(client);
        let Some(outstanding) = state.outstanding.get_mut(&msg_id) else {
            return Ok(()); // answered in the meantime
        };
        if outstanding.retries_left == 0 {
            return Err(SimError::WireTimeout { client });
        }
        outstanding.retries_left -= 1;
        let bytes = outstanding.bytes.clone();
        self.transmit(now, Endpoint::Client(client), Endpoint::Server, bytes);
        self.push(
            now + self.net.rto,
            WireKind::Retx,
            WirePayload::Retx { client, msg_id },
        );
        Ok(())
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.heap.pop() {
            let now = ev.time;
            match ev.payload {
                WirePayload::Activate { idx } => self.on_activate(now, idx),
                WirePayload::Deliver { from, to, bytes } => match to {
                    Endpoint::Server => self.on_server_datagram(now, from, &bytes),
                    Endpoint::Client(c) => self.on_client_datagram(now, c, &bytes),
                },
                WirePayload::DevStart { client, seq } => self.on_dev_start(now, client, seq),
                WirePayload::DevEnd { client, seq } => self.on_dev_end(now, client, seq),
                WirePayload::Think { client, seq } => {
                    if self.clients[client.0 as usize - 1].status == WireClientStatus::Running {
                        self.send_launch(now, client, seq);
                    }
                }
                WirePayload::Retx { client, msg_id } => self.on_retx(now, client, msg_id)?,
            }
        }
        Ok(())
    }
}

/// Run the same trace-replay simulation as the direct engine, but with all
/// control traffic flowing through the datagram protocol over a seeded
/// lossy in-memory channel. With a perfect channel the resulting decision
/// log matches the direct engine's decisions exactly; with loss, the
/// reliability layer must still dispatch every kernel exactly once.
pub fn run_wire_simulation(
    tasks: &[SimTask],
    mode: SchedMode,
    sim_cfg: &SimConfig,
    net: &NetConfig,
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
    let mut scheduler = Scheduler::new(mode, sim_cfg.scheduler.clone());
    for p in profiles {
        scheduler.load_profile(p.clone());
    }
    let clients: Vec<WireClient> = tasks
        .iter()
        .enumerate()
        .map(|(i, task)| WireClient {
            client: ClientId(i as u64 + 1),
            task: task.clone(),
            status: WireClientStatus::Pending,
            next_msg_id: 1,
            outstanding: BTreeMap::new(),
            submitted: 0,
            cur_run: 0,
            run_issued: task.issue_time,
        })
        .collect();
    let mut engine = WireEngine {
        heap: BinaryHeap::new(),
        next_event_id: 0,
        rng: ChaCha8Rng::seed_from_u64(net.seed),
        net: net.clone(),
        sim: sim_cfg.clone(),
        server: ServerCore::new(scheduler),
        clients,
        device: VecDeque::new(),
        device_busy: false,
        records: Vec::new(),
        rec_index: BTreeMap::new(),
        run_records: Vec::new(),
        mode,
    };
    for i in 0..engine.clients.len() {
        let at = engine.clients[i].task.issue_time;
        engine.push(at, WireKind::Activate, WirePayload::Activate { idx: i });
    }
    engine.run()?;
    let mut runs = engine.run_records;
    runs.sort_by_key(|r| (r.client, r.run_ord));
    Ok(SimOutcome {
        report: JctReport { mode, runs },
        log: DecisionLog(engine.records),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device_sim::run_simulation;
    use crate::kernel_model::KernelInvocation;
    use crate::profiler::build_profile;
    use crate::scheduler::SchedulerConfig;
    use std::collections::BTreeSet;

    fn task(name: &str, prio: u8, issue: u64, repeats: u32, steps: &[(u64, u64)]) -> SimTask {
        let key = TaskKey::new(name, Vec::<String>::new()).unwrap();
        let n = steps.len();
        let invocations = steps
            .iter()
            .enumerate()
            .map(|(i, (exec, gap))| KernelInvocation {
                kernel_id: KernelId::new(
                    format!("{name}_k{i}"),
                    (64, 1, 1),
                    (i as u32 + 1, 1, 1),
                )
                .unwrap(),
                exec_time: TimeUs(*exec),
                idle_after: (i + 1 < n).then_some(TimeUs(*gap)),
            })
            .collect();
        SimTask {
            task_key: key.clone(),
            priority: Priority::new(prio).unwrap(),
            script: crate::kernel_model::RunTrace::new(key, 1, invocations),
            issue_time: TimeUs(issue),
            repeat_count: repeats,
        }
    }

    fn perfect_profile(t: &SimTask) -> Profile {
        build_profile(&t.task_key, std::slice::from_ref(&t.script)).unwrap()
    }

    fn client_env(client: u64, msg_id: u64, msg: Message) -> Vec<u8> {
        encode(&Envelope {
            header: Header {
                msg_id,
                sender: client,
            },
            msg,
        })
        .unwrap()
    }

    fn decode_reply(out: &ServerOutput, idx: usize) -> Message {
        decode(&out.replies[idx].1).unwrap().msg
    }

    #[test]
    fn server_core_acks_grants_and_deduplicates() {
        let scheduler = Scheduler::new(SchedMode::Fikit, SchedulerConfig::default());
        let mut server = ServerCore::new(scheduler);
        let key = TaskKey::new("svc", Vec::<String>::new()).unwrap();
        let kid = KernelId::new("k1", (1, 1, 1), (1, 1, 1)).unwrap();

        // Register is echoed; a duplicate is echoed again.
        let reg = Message::Register {
            task_key: key.clone(),
            priority: Priority::HIGHEST,
            mode: SchedMode::Fikit,
        };
        let out = server.on_datagram(TimeUs(0), &client_env(1, 1, reg.clone()));
        assert!(matches!(decode_reply(&out, 0), Message::Register { .. }));
        let out = server.on_datagram(TimeUs(1), &client_env(1, 1, reg));
        assert!(matches!(decode_reply(&out, 0), Message::Register { .. }));

        // Launch gets exactly one dispatch; duplicates re-send the grant
        // without re-driving the scheduler.
        let launch = Message::KernelLaunch {
            client: ClientId(1),
            kernel_id: kid,
            seq: 1,
        };
        let out = server.on_datagram(TimeUs(2), &client_env(1, 2, launch.clone()));
        assert_eq!(out.dispatches.len(), 1);
        assert!(matches!(
            decode_reply(&out, 0),
            Message::ScheduleGrant { seq: 1, .. }
        ));
        let out = server.on_datagram(TimeUs(3), &client_env(1, 2, launch));
        assert!(out.dispatches.is_empty(), "duplicate launch never re-dispatches");
        assert!(matches!(
            decode_reply(&out, 0),
            Message::ScheduleGrant { seq: 1, .. }
        ));

        // Out-of-order sequence numbers are rejected.
        let bad = Message::KernelLaunch {
            client: ClientId(1),
            kernel_id: KernelId::new("k9", (1, 1, 1), (1, 1, 1)).unwrap(),
            seq: 5,
        };
        let out = server.on_datagram(TimeUs(4), &client_env(1, 3, bad));
        assert!(matches!(
            decode_reply(&out, 0),
            Message::Error {
                code: error_code::BAD_SEQUENCE,
                ..
            }
        ));

        // Completion is echo-acked; a duplicate is acked but inert.
        let complete = Message::KernelComplete {
            client: ClientId(1),
            seq: 1,
            exec_time: TimeUs(500),
        };
        let out = server.on_datagram(TimeUs(5), &client_env(1, 4, complete.clone()));
        assert!(matches!(
            decode_reply(&out, 0),
            Message::KernelComplete { seq: 1, .. }
        ));
        let inflight_after_first = server.scheduler().inflight_count();
        let out = server.on_datagram(TimeUs(6), &client_env(1, 4, complete));
        assert!(matches!(
            decode_reply(&out, 0),
            Message::KernelComplete { seq: 1, .. }
        ));
        assert_eq!(server.scheduler().inflight_count(), inflight_after_first);

        // Task done: echo, duplicate echo.
        let done = Message::TaskDone { client: ClientId(1) };
        let out = server.on_datagram(TimeUs(7), &client_env(1, 5, done.clone()));
        assert!(matches!(decode_reply(&out, 0), Message::TaskDone { .. }));
        let out = server.on_datagram(TimeUs(8), &client_env(1, 5, done));
        assert!(matches!(decode_reply(&out, 0), Message::TaskDone { .. }));

        // Launch from an unregistered client is answered with an error.
        let out = server.on_datagram(
            TimeUs(9),
            &client_env(
                9,
                1,
                Message::KernelLaunch {
                    client: ClientId(9),
                    kernel_id: KernelId::new("x", (1, 1, 1), (1, 1, 1)).unwrap(),
                    seq: 1,
                },
            ),
        );
        assert!(matches!(
            decode_reply(&out, 0),
            Message::Error {
                code: error_code::UNKNOWN_CLIENT,
                ..
            }
        ));
    }

    #[test]
    fn lossless_wire_run_matches_direct_run() {
        let a = task("a", 0, 0, 3, &[(1000, 4000), (2000, 2500), (800, 0)]);
        let b = task("b", 3, 600, 3, &[(1500, 500), (900, 0)]);
        let profiles = vec![perfect_profile(&a), perfect_profile(&b)];
        let sim_cfg = SimConfig::default();

        let direct = run_simulation(
            &[a.clone(), b.clone()],
            SchedMode::Fikit,
            &sim_cfg,
            &profiles,
        )
        .unwrap();
        let wired = run_wire_simulation(
            &[a, b],
            SchedMode::Fikit,
            &sim_cfg,
            &NetConfig::default(),
            &profiles,
        )
        .unwrap();

        assert_eq!(direct.log.semantic_rows(), wired.log.semantic_rows());
        // With a perfect zero-latency channel even the timings agree.
        let jcts = |o: &SimOutcome| -> Vec<(ClientId, u32, TimeUs)> {
            o.report
                .runs
                .iter()
                .map(|r| (r.client, r.run_ord, r.jct))
                .collect()
        };
        assert_eq!(jcts(&direct), jcts(&wired));
    }

    #[test]
    fn lossy_wire_run_dispatches_exactly_once() {
        let a = task("a", 0, 0, 4, &[(1000, 4000), (2000, 2500), (800, 0)]);
        let b = task("b", 3, 600, 4, &[(1500, 500), (900, 0)]);
        let profiles = vec![perfect_profile(&a), perfect_profile(&b)];
        let sim_cfg = SimConfig::default();
        let direct = run_simulation(
            &[a.clone(), b.clone()],
            SchedMode::Fikit,
            &sim_cfg,
            &profiles,
        )
        .unwrap();

        for seed in [1, 2, 3] {
            let net = NetConfig::lossy(0.3, seed);
            let wired = run_wire_simulation(
                &[a.clone(), b.clone()],
                SchedMode::Fikit,
                &sim_cfg,
                &net,
                &profiles,
            )
            .unwrap();
            // Every kernel of every repeat executed exactly once.
            assert_eq!(wired.log.0.len(), 4 * 3 + 4 * 2, "seed {seed}");
            let unique: BTreeSet<(ClientId, u64)> =
                wired.log.0.iter().map(|r| (r.client, r.seq)).collect();
            assert_eq!(unique.len(), wired.log.0.len(), "seed {seed}");
            for r in &wired.log.0 {
                assert!(r.ended >= r.started, "kernel actually executed");
            }
            // All runs completed despite 30% datagram loss.
            assert_eq!(
                wired
                    .report
                    .runs
                    .iter()
                    .filter(|r| r.status == RunStatus::Completed)
                    .count(),
                direct.report.runs.len(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn exclusive_over_wire_rejects_second_task() {
        let a = task("a", 0, 0, 1, &[(5000, 1000), (5000, 0)]);
        let b = task("b", 1, 100, 1, &[(2000, 0)]);
        let out = run_wire_simulation(
            &[a.clone(), b.clone()],
            SchedMode::Exclusive,
            &SimConfig::default(),
            &NetConfig::default(),
            &[],
        )
        .unwrap();
        let b_runs: Vec<_> = out
            .report
            .runs
            .iter()
            .filter(|r| r.task_key == b.task_key)
            .collect();
        assert_eq!(b_runs[0].status, RunStatus::FailedToStart);
        let a_runs: Vec<_> = out
            .report
            .runs
            .iter()
            .filter(|r| r.task_key == a.task_key)
            .collect();
        assert_eq!(a_runs[0].status, RunStatus::Completed);
        assert_eq!(a_runs[0].jct, a.script.base_jct());
    }
}
