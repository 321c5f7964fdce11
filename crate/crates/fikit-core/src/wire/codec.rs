//! Binary datagram encoding of control messages.
//!
//! Layout: 2-byte magic, 1-byte version, 1-byte message tag, then a fixed
//! header (message id, sender id, both little-endian u64), then the
//! tag-specific payload. Integers are fixed-width little-endian; text is
//! length-prefixed with a u16. A datagram never exceeds
//! [`MAX_DATAGRAM_LEN`] bytes, which keeps it below common MTUs.
//! Decoding is strict: wrong magic or version, truncation, trailing bytes,
//! and out-of-range values are distinct, reportable errors, and no input
//! can panic the decoder.

use thiserror::Error;

use crate::kernel_model::{Dim3, KernelId, Priority, TaskKey, TimeUs};
use crate::scheduler::{ClientId, DecisionKind, SchedMode};

pub const MAGIC: [u8; 2] = *b"FK";
pub const VERSION: u8 = 1;
/// Single-datagram safety cap: below common path MTUs, no fragmentation.
pub const MAX_DATAGRAM_LEN: usize = 1200;

/// Protocol error codes carried by [`Message::Error`].
pub mod error_code {
    /// The requested scheduling mode differs from the server's.
    pub const MODE_MISMATCH: u16 = 1;
    /// The device is exclusively occupied by another task.
    pub const OCCUPIED: u16 = 2;
    /// Kernel sequence numbers must increase by exactly one.
    pub const BAD_SEQUENCE: u16 = 3;
    /// The sender never registered.
    pub const UNKNOWN_CLIENT: u16 = 4;
    /// The registration conflicts with an earlier one.
    pub const REGISTRATION_CONFLICT: u16 = 5;
}

/// Fixed per-datagram header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    /// Unique per sender; a retransmission reuses the original id.
    pub msg_id: u64,
    /// The sending endpoint: a client id, or 0 for the scheduler.
    pub sender: u64,
}

/// Control-protocol messages between hook clients and the scheduler.
///
/// Reliability convention: clients retransmit every message until the
/// scheduler's answer arrives. A `KernelLaunch` is answered by exactly one
/// logical `ScheduleGrant` (re-sent verbatim on duplicates) or an `Error`;
/// `Register`, `KernelComplete`, and `TaskDone` are acknowledged by echoing
/// the message back. The scheduler deduplicates by `(client, seq)` and by
/// message kind, so duplicate delivery never double-drives scheduling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Register {
        task_key: TaskKey,
        priority: Priority,
        mode: SchedMode,
    },
    KernelLaunch {
        client: ClientId,
        kernel_id: KernelId,
        seq: u64,
    },
    ScheduleGrant {
        client: ClientId,
        seq: u64,
        kind: DecisionKind,
    },
    KernelComplete {
        client: ClientId,
        seq: u64,
        exec_time: TimeUs,
    },
    TaskDone {
        client: ClientId,
    },
    Error {
        code: u16,
        detail: String,
    },
}

/// A header plus message, the unit that travels in one datagram.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub header: Header,
    pub msg: Message,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("text field of {len} bytes exceeds the u16 length prefix")]
    TextTooLong { len: usize },
    #[error("encoded datagram of {len} bytes exceeds the {MAX_DATAGRAM_LEN}-byte cap")]
    DatagramTooLarge { len: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message tag {0}")]
    BadTag(u8),
    #[error("datagram truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} bytes of trailing garbage")]
    TrailingBytes(usize),
    #[error("text field is not valid UTF-8")]
    BadUtf8,
    #[error("invalid {field}: {reason}")]
    BadValue {
        field: &'static str,
        reason: String,
    },
}

const TAG_REGISTER: u8 = 1;
const TAG_LAUNCH: u8 = 2;
const TAG_GRANT: u8 = 3;
const TAG_COMPLETE: u8 = 4;
const TAG_DONE: u8 = 5;
const TAG_ERROR: u8 = 6;

fn mode_byte(mode: SchedMode) -> u8 {
    match mode {
        SchedMode::Fikit => 0,
        SchedMode::DefaultShare => 1,
        SchedMode::Exclusive => 2,
    }
}

fn mode_from(b: u8) -> Result<SchedMode, DecodeError> {
    match b {
        0 => Ok(SchedMode::Fikit),
        1 => Ok(SchedMode::DefaultShare),
        2 => Ok(SchedMode::Exclusive),
        other => Err(DecodeError::BadValue {
            field: "mode",
            reason: format!("byte {other}"),
        }),
    }
}

fn kind_byte(kind: DecisionKind) -> u8 {
    match kind {
        DecisionKind::Holder => 0,
        DecisionKind::Fill => 1,
        DecisionKind::Fifo => 2,
    }
}

fn kind_from(b: u8) -> Result<DecisionKind, DecodeError> {
    match b {
        0 => Ok(DecisionKind::Holder),
        1 => Ok(DecisionKind::Fill),
        2 => Ok(DecisionKind::Fifo),
        other => Err(DecodeError::BadValue {
            field: "grant kind",
            reason: format!("byte {other}"),
        }),
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn text(&mut self, s: &str) -> Result<(), EncodeError> {
        let len = s.len();
        if len > u16::MAX as usize {
            return Err(EncodeError::TextTooLong { len });
        }
        self.u16(len as u16);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn dim(&mut self, d: Dim3) {
        self.u32(d.x);
        self.u32(d.y);
        self.u32(d.z);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &'static str) -> Result<&'a str, DecodeError> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        std::str::from_utf8(bytes).map_err(|_| DecodeError::BadUtf8)
    }

    fn dim(&mut self, what: &'static str) -> Result<Dim3, DecodeError> {
        Ok(Dim3::new(self.u32(what)?, self.u32(what)?, self.u32(what)?))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        let rest = self.buf.len() - self.pos;
        if rest > 0 {
            return Err(DecodeError::TrailingBytes(rest));
        }
        Ok(())
    }
}

/// Serialize an envelope into one datagram.
pub fn encode(env: &Envelope) -> Result<Vec<u8>, EncodeError> {
    let mut w = Writer {
        buf: Vec::with_capacity(64),
    };
    w.buf.extend_from_slice(&MAGIC);
    w.u8(VERSION);
    let tag = match &env.msg {
        Message::Register { .. } => TAG_REGISTER,
        Message::KernelLaunch { .. } => TAG_LAUNCH,
        Message::ScheduleGrant { .. } => TAG_GRANT,
        Message::KernelComplete { .. } => TAG_COMPLETE,
        Message::TaskDone { .. } => TAG_DONE,
        Message::Error { .. } => TAG_ERROR,
    };
    w.u8(tag);
    w.u64(env.header.msg_id);
    w.u64(env.header.sender);
    match &env.msg {
        Message::Register {
            task_key,
            priority,
            mode,
        } => {
            w.text(task_key.process_name())?;
            let args = task_key.launch_args();
            if args.len() > u16::MAX as usize {
                return Err(EncodeError::TextTooLong { len: args.len() });
            }
            w.u16(args.len() as u16);
            for arg in args {
                w.text(arg)?;
            }
            w.u8(priority.level());
            w.u8(mode_byte(*mode));
        }
        Message::KernelLaunch {
            client,
            kernel_id,
            seq,
        } => {
            w.u64(client.0);
            w.u64(*seq);
            w.text(kernel_id.function_name())?;
            w.dim(kernel_id.block_dim());
            w.dim(kernel_id.grid_dim());
        }
        Message::ScheduleGrant { client, seq, kind } => {
            w.u64(client.0);
            w.u64(*seq);
            w.u8(kind_byte(*kind));
        }
        Message::KernelComplete {
            client,
            seq,
            exec_time,
        } => {
            w.u64(client.0);
            w.u64(*seq);
            w.u64(exec_time.as_u64());
        }
        Message::TaskDone { client } => {
            w.u64(client.0);
        }
        Message::Error { code, detail } => {
            w.u16(*code);
            w.text(detail)?;
        }
    }
    if w.buf.len() > MAX_DATAGRAM_LEN {
        return Err(EncodeError::DatagramTooLarge { len: w.buf.len() });
    }
    Ok(w.buf)
}

/// Parse one datagram. Never panics on arbitrary input.
pub fn decode(bytes: &[u8]) -> Result<Envelope, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(2, "magic")?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    let tag = r.u8("tag")?;
    let header = Header {
        msg_id: r.u64("msg_id")?,
        sender: r.u64("sender")?,
    };
    let msg = match tag {
        TAG_REGISTER => {
            let process = r.text("process name")?.to_string();
            let argc = r.u16("arg count")? as usize;
            let mut args = Vec::with_capacity(argc.min(256));
            for _ in 0..argc {
                args.push(r.text("launch arg")?.to_string());
            }
            let task_key = TaskKey::new(process, args).map_err(|e| DecodeError::BadValue {
                field: "task key",
                reason: e.to_string(),
            })?;
            let priority =
                Priority::new(r.u8("priority")?).map_err(|e| DecodeError::BadValue {
                    field: "priority",
                    reason: e.to_string(),
                })?;
            let mode = mode_from(r.u8("mode")?)?;
            Message::Register {
                task_key,
                priority,
                mode,
            }
        }
        TAG_LAUNCH => {
            let client = ClientId(r.u64("client")?);
            let seq = r.u64("seq")?;
            let name = r.text("kernel name")?.to_string();
            let block = r.dim("block dim")?;
            let grid = r.dim("grid dim")?;
            let kernel_id = KernelId::new(name, block, grid).map_err(|e| DecodeError::BadValue {
                field: "kernel id",
                reason: e.to_string(),
            })?;
            Message::KernelLaunch {
                client,
                kernel_id,
                seq,
            }
        }
        TAG_GRANT => Message::ScheduleGrant {
            client: ClientId(r.u64("client")?),
            seq: r.u64("seq")?,
            kind: kind_from(r.u8("grant kind")?)?,
        },
        TAG_COMPLETE => Message::KernelComplete {
            client: ClientId(r.u64("client")?),
            seq: r.u64("seq")?,
            exec_time: TimeUs(r.u64("exec time")?),
        },
        TAG_DONE => Message::TaskDone {
            client: ClientId(r.u64("client")?),
        },
        TAG_ERROR => Message::Error {
            code: r.u16("error code")?,
            detail: r.text("error detail")?.to_string(),
        },
        other => return Err(DecodeError::BadTag(other)),
    };
    r.finish()?;
    Ok(Envelope { header, msg })
}
