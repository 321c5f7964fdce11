//! Kernel identity, task identity, time units, and run traces.
//!
//! These are the value types every other module builds on. A kernel is
//! identified by its function name plus block/grid dimensions; a task is
//! identified by its process name plus launch arguments; a run trace is the
//! ordered record of one exclusive run of a task, with per-invocation
//! execution times and trailing idle gaps.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use thiserror::Error;

/// Number of scheduler priority levels (Q0..Q9).
pub const PRIORITY_LEVELS: usize = 10;

/// Magic token on the first line of a trace file.
pub const TRACE_MAGIC: &str = "#fikit-trace";
/// Trace file format version token.
pub const TRACE_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("kernel function name must be non-empty")]
    EmptyFunctionName,
    #[error("kernel function name contains tab or newline: {0:?}")]
    FunctionNameControlChar(String),
    #[error("{which} dimension must have all components >= 1, got {dim}")]
    ZeroDimension { which: &'static str, dim: Dim3 },
    #[error("task key text must not contain newlines: {0:?}")]
    TaskKeyControlChar(String),
    #[error("priority level {0} out of range 0..=9")]
    PriorityOutOfRange(u8),
    #[error("malformed canonical task key at byte {pos}: {reason}")]
    CanonicalParse { pos: usize, reason: &'static str },
}

/// Integer microseconds. All simulator and profiler arithmetic stays in
/// non-negative integer microseconds so results are exactly reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeUs(pub u64);

/// Divide rounding to nearest, ties rounding up.
pub(crate) fn div_round_half_up(num: u128, den: u128) -> u64 {
    debug_assert!(den > 0);
    ((2 * num + den) / (2 * den)) as u64
}

impl TimeUs {
    pub const ZERO: TimeUs = TimeUs(0);

    pub fn from_millis(ms: u64) -> TimeUs {
        TimeUs(ms * 1000)
    }

    pub fn from_secs(s: u64) -> TimeUs {
        TimeUs(s * 1_000_000)
    }

    pub fn as_u64(self) -> u64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Subtraction that reports underflow instead of wrapping.
    pub fn checked_sub(self, rhs: TimeUs) -> Option<TimeUs> {
        self.0.checked_sub(rhs.0).map(TimeUs)
    }

    /// Subtraction clamped at zero, for contracts that call for saturation.
    pub fn saturating_sub(self, rhs: TimeUs) -> TimeUs {
        TimeUs(self.0.saturating_sub(rhs.0))
    }

    /// Scale by a factor expressed in thousandths (1500 = x1.5), rounding to
    /// the nearest microsecond with ties up.
    pub fn scale_milli(self, factor_milli: u64) -> TimeUs {
        TimeUs(div_round_half_up(
            self.0 as u128 * factor_milli as u128,
            1000,
        ))
    }

    /// Scale by a factor expressed in millionths, rounding to the nearest
    /// microsecond with ties up.
    pub fn scale_ppm(self, factor_ppm: u64) -> TimeUs {
        TimeUs(div_round_half_up(
            self.0 as u128 * factor_ppm as u128,
            1_000_000,
        ))
    }
}

impl Add for TimeUs {
    type Output = TimeUs;
    fn add(self, rhs: TimeUs) -> TimeUs {
        TimeUs(self.0 + rhs.0)
    }
}

impl AddAssign for TimeUs {
    fn add_assign(&mut self, rhs: TimeUs) {
        self.0 += rhs.0;
    }
}

impl Sum for TimeUs {
    fn sum<I: Iterator<Item = TimeUs>>(iter: I) -> TimeUs {
        iter.fold(TimeUs::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for TimeUs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A block or grid dimension triple. All components must be >= 1 in a valid
/// kernel id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Dim3 {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Dim3 {
    pub fn new(x: u32, y: u32, z: u32) -> Dim3 {
        Dim3 { x, y, z }
    }

    fn is_valid(self) -> bool {
        self.x >= 1 && self.y >= 1 && self.z >= 1
    }
}

impl From<(u32, u32, u32)> for Dim3 {
    fn from((x, y, z): (u32, u32, u32)) -> Dim3 {
        Dim3 { x, y, z }
    }
}

impl fmt::Display for Dim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

/// Identity of a kernel: function name plus block and grid dimensions.
///
/// Identity is deliberately independent of the kernel's position within a
/// run, of the run index, and of the kernel's argument values: two
/// invocations with equal `KernelId` may well have different execution
/// times, and the profiler averages over them.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KernelId {
    function_name: String,
    block_dim: Dim3,
    grid_dim: Dim3,
}

impl KernelId {
    pub fn new(
        function_name: impl Into<String>,
        block_dim: impl Into<Dim3>,
        grid_dim: impl Into<Dim3>,
    ) -> Result<KernelId, ModelError> {
        let function_name = function_name.into();
        let block_dim = block_dim.into();
        let grid_dim = grid_dim.into();
        if function_name.is_empty() {
            return Err(ModelError::EmptyFunctionName);
        }
        if function_name.contains(['\t', '\n', '\r']) {
            return Err(ModelError::FunctionNameControlChar(function_name));
        }
        if !block_dim.is_valid() {
            return Err(ModelError::ZeroDimension {
                which: "block",
                dim: block_dim,
            });
        }
        if !grid_dim.is_valid() {
            return Err(ModelError::ZeroDimension {
                which: "grid",
                dim: grid_dim,
            });
        }
        Ok(KernelId {
            function_name,
            block_dim,
            grid_dim,
        })
    }

    pub fn function_name(&self) -> &str {
        &self.function_name
    }

    pub fn block_dim(&self) -> Dim3 {
        self.block_dim
    }

    pub fn grid_dim(&self) -> Dim3 {
        self.grid_dim
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/b{},{},{}/g{},{},{}",
            self.function_name,
            self.block_dim.x,
            self.block_dim.y,
            self.block_dim.z,
            self.grid_dim.x,
            self.grid_dim.y,
            self.grid_dim.z
        )
    }
}

/// Unique identifier of a task: process name plus launch arguments.
///
/// The canonical serialization is length-prefixed so arbitrary argument text
/// (including separators) round-trips losslessly. Newlines are rejected at
/// construction because every store format is line-oriented.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskKey {
    process_name: String,
    launch_args: Vec<String>,
}

impl TaskKey {
    pub fn new(
        process_name: impl Into<String>,
        launch_args: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<TaskKey, ModelError> {
        let process_name = process_name.into();
        let launch_args: Vec<String> = launch_args.into_iter().map(Into::into).collect();
        for part in std::iter::once(&process_name).chain(launch_args.iter()) {
            if part.contains(['\n', '\r']) {
                return Err(ModelError::TaskKeyControlChar(part.clone()));
            }
        }
        Ok(TaskKey {
            process_name,
            launch_args,
        })
    }

    pub fn process_name(&self) -> &str {
        &self.process_name
    }

    pub fn launch_args(&self) -> &[String] {
        &self.launch_args
    }

    /// Canonical single-token form: `len:process|len:arg|...` with byte
    /// lengths in decimal. Deterministic and unambiguous for any content.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{}:{}",
            self.process_name.len(),
            self.process_name
        ));
        for arg in &self.launch_args {
            out.push_str(&format!("|{}:{}", arg.len(), arg));
        }
        out
    }

    /// Parse the canonical form produced by [`TaskKey::canonical`].
    pub fn parse_canonical(s: &str) -> Result<TaskKey, ModelError> {
        let bytes = s.as_bytes();
        let mut pos = 0;
        let mut parts: Vec<String> = Vec::new();
        loop {
            let len_start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if pos == len_start {
                return Err(ModelError::CanonicalParse {
                    pos,
                    reason: "expected decimal length",
                });
            }
            let len: usize = s[len_start..pos].parse().map_err(|_| {
                ModelError::CanonicalParse {
                    pos: len_start,
                    reason: "length out of range",
                }
            })?;
            if pos >= bytes.len() || bytes[pos] != b':' {
                return Err(ModelError::CanonicalParse {
                    pos,
                    reason: "expected ':' after length",
                });
            }
            pos += 1;
            let end = pos.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(
                ModelError::CanonicalParse {
                    pos,
                    reason: "length exceeds input",
                },
            )?;
            let part = s.get(pos..end).ok_or(ModelError::CanonicalParse {
                pos,
                reason: "length splits a UTF-8 character",
            })?;
            parts.push(part.to_string());
            pos = end;
            if pos == bytes.len() {
                break;
            }
            if bytes[pos] != b'|' {
                return Err(ModelError::CanonicalParse {
                    pos,
                    reason: "expected '|' between fields",
                });
            }
            pos += 1;
        }
        let process_name = parts.remove(0);
        TaskKey::new(process_name, parts)
    }

    /// Filesystem-safe encoding of the canonical form: bytes outside
    /// `[A-Za-z0-9._-]` are percent-encoded.
    pub fn file_stem(&self) -> String {
        let canonical = self.canonical();
        let mut out = String::with_capacity(canonical.len());
        for b in canonical.bytes() {
            match b {
                b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'.' | b'_' | b'-' => {
                    out.push(b as char)
                }
                _ => out.push_str(&format!("%{b:02X}")),
            }
        }
        out
    }
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Scheduling priority level in 0..=9; level 0 is the highest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Priority(u8);

impl Priority {
    pub const HIGHEST: Priority = Priority(0);
    pub const LOWEST: Priority = Priority(9);

    pub fn new(level: u8) -> Result<Priority, ModelError> {
        if level as usize >= PRIORITY_LEVELS {
            return Err(ModelError::PriorityOutOfRange(level));
        }
        Ok(Priority(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// True when `self` schedules strictly before `other`.
    pub fn outranks(self, other: Priority) -> bool {
        self.0 < other.0
    }

    /// The next lower priority level, or `None` at the bottom.
    pub fn next_lower(self) -> Option<Priority> {
        if (self.0 as usize) + 1 < PRIORITY_LEVELS {
            Some(Priority(self.0 + 1))
        } else {
            None
        }
    }

    pub fn all() -> impl Iterator<Item = Priority> {
        (0..PRIORITY_LEVELS as u8).map(Priority)
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

/// One kernel invocation within a run: identity, execution time, and the
/// idle gap that followed it. The final invocation of a run has no gap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelInvocation {
    pub kernel_id: KernelId,
    pub exec_time: TimeUs,
    pub idle_after: Option<TimeUs>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace has no invocations")]
    Empty,
    #[error("run_index must be >= 1")]
    ZeroRunIndex,
    #[error("invocation {index} is not the last but has no idle_after")]
    MissingIdleAfter { index: usize },
    #[error("invocation {index} is the last but carries an idle_after")]
    UnexpectedIdleAfter { index: usize },
}

/// One exclusive-mode run of a task: an ordered list of kernel invocations.
/// A valid run of N kernels carries exactly N-1 idle gaps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunTrace {
    pub task_key: TaskKey,
    pub run_index: u32,
    pub invocations: Vec<KernelInvocation>,
}

impl RunTrace {
    pub fn new(task_key: TaskKey, run_index: u32, invocations: Vec<KernelInvocation>) -> RunTrace {
        RunTrace {
            task_key,
            run_index,
            invocations,
        }
    }

    /// Check the gap-placement invariant, reporting the 1-based index of the
    /// first violating invocation.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.invocations.is_empty() {
            return Err(TraceError::Empty);
        }
        if self.run_index == 0 {
            return Err(TraceError::ZeroRunIndex);
        }
        let last = self.invocations.len() - 1;
        for (i, inv) in self.invocations.iter().enumerate() {
            if i < last && inv.idle_after.is_none() {
                return Err(TraceError::MissingIdleAfter { index: i + 1 });
            }
            if i == last && inv.idle_after.is_some() {
                return Err(TraceError::UnexpectedIdleAfter { index: i + 1 });
            }
        }
        Ok(())
    }

    pub fn kernel_count(&self) -> usize {
        self.invocations.len()
    }

    /// Solo job completion time: the sum of all execution times and gaps.
    pub fn base_jct(&self) -> TimeUs {
        self.invocations
            .iter()
            .map(|inv| inv.exec_time + inv.idle_after.unwrap_or(TimeUs::ZERO))
            .sum()
    }
}

#[derive(Debug, Error)]
pub enum TraceFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("missing trace header line")]
    MissingHeader,
    #[error("bad trace header: {0}")]
    BadHeader(String),
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("run {run_index} is invalid: {source}")]
    InvalidRun {
        run_index: u32,
        #[source]
        source: TraceError,
    },
}

/// Write one or more runs of a single task as a trace file.
///
/// Format: a header line `#fikit-trace v1 <canonical task key>`, an optional
/// `#`-prefixed column comment, then one tab-separated record per invocation:
/// `run seq function block_x block_y block_z grid_x grid_y grid_z exec_us
/// idle_us`, where `idle_us` is `-` on the final invocation of each run.
pub fn write_trace_file<W: Write>(
    w: &mut W,
    task_key: &TaskKey,
    runs: &[RunTrace],
) -> io::Result<()> {
    writeln!(
        w,
        "{} {} {}",
        TRACE_MAGIC,
        TRACE_VERSION,
        task_key.canonical()
    )?;
    writeln!(
        w,
        "# run\tseq\tfunction\tblock_x\tblock_y\tblock_z\tgrid_x\tgrid_y\tgrid_z\texec_us\tidle_us"
    )?;
    for run in runs {
        for (i, inv) in run.invocations.iter().enumerate() {
            let idle = match inv.idle_after {
                Some(t) => t.to_string(),
                None => "-".to_string(),
            };
            let id = &inv.kernel_id;
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                run.run_index,
                i + 1,
                id.function_name(),
                id.block_dim().x,
                id.block_dim().y,
                id.block_dim().z,
                id.grid_dim().x,
                id.grid_dim().y,
                id.grid_dim().z,
                inv.exec_time,
                idle
            )?;
        }
    }
    Ok(())
}

/// Parse a trace file produced by [`write_trace_file`]. Rejects malformed
/// lines, non-contiguous runs, out-of-order sequence numbers, and runs that
/// violate the gap-placement invariant.
pub fn read_trace_file<R: BufRead>(r: R) -> Result<(TaskKey, Vec<RunTrace>), TraceFileError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(TraceFileError::MissingHeader)??;
    let rest = header
        .strip_prefix(TRACE_MAGIC)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| TraceFileError::BadHeader(header.clone()))?;
    let rest = rest
        .strip_prefix(TRACE_VERSION)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| TraceFileError::BadHeader(format!("unsupported version in {header:?}")))?;
    let task_key = TaskKey::parse_canonical(rest)?;

    let mut runs: Vec<RunTrace> = Vec::new();
    let mut seen_runs: Vec<u32> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 11 {
            return Err(TraceFileError::Line {
                line: lineno,
                reason: format!("expected 11 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_u = |s: &str, what: &str| -> Result<u64, TraceFileError> {
            s.parse().map_err(|_| TraceFileError::Line {
                line: lineno,
                reason: format!("bad {what}: {s:?}"),
            })
        };
        let run_index = parse_u(fields[0], "run index")? as u32;
        let seq = parse_u(fields[1], "seq index")? as usize;
        let dims: Vec<u32> = fields[3..9]
            .iter()
            .enumerate()
            .map(|(i, s)| parse_u(s, &format!("dimension field {}", i + 4)).map(|v| v as u32))
            .collect::<Result<_, _>>()?;
        let kernel_id = KernelId::new(
            fields[2],
            Dim3::new(dims[0], dims[1], dims[2]),
            Dim3::new(dims[3], dims[4], dims[5]),
        )?;
        let exec_time = TimeUs(parse_u(fields[9], "exec_us")?);
        let idle_after = if fields[10] == "-" {
            None
        } else {
            Some(TimeUs(parse_u(fields[10], "idle_us")?))
        };

        let start_new_run = match runs.last() {
            Some(last) => last.run_index != run_index,
            None => true,
        };
        if start_new_run {
            if seen_runs.contains(&run_index) {
                return Err(TraceFileError::Line {
                    line: lineno,
                    reason: format!("run {run_index} is not contiguous"),
                });
            }
            seen_runs.push(run_index);
            runs.push(RunTrace::new(task_key.clone(), run_index, Vec::new()));
        }
        let run = runs.last_mut().expect("just pushed");
        if seq != run.invocations.len() + 1 {
            return Err(TraceFileError::Line {
                line: lineno,
                reason: format!(
                    "seq {seq} out of order, expected {}",
                    run.invocations.len() + 1
                ),
            });
        }
        run.invocations.push(KernelInvocation {
            kernel_id,
            exec_time,
            idle_after,
        });
    }
    for run in &runs {
        run.validate().map_err(|source| TraceFileError::InvalidRun {
            run_index: run.run_index,
            source,
        })?;
    }
    Ok((task_key, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kid(name: &str, grid_x: u32) -> KernelId {
        KernelId::new(name, (256, 1, 1), (grid_x, 1, 1)).unwrap()
    }

    #[test]
    fn kernel_id_construction_and_equality() {
        let a = KernelId::new("vectorAdd", (256, 1, 1), (16, 1, 1)).unwrap();
        assert_eq!(a.function_name(), "vectorAdd");
        assert_eq!(a.block_dim(), Dim3::new(256, 1, 1));
        assert_eq!(a.grid_dim(), Dim3::new(16, 1, 1));

        let b = KernelId::new("vectorAdd", (256, 1, 1), (16, 1, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_dim_is_part_of_identity() {
        let a = KernelId::new("vectorAdd", (256, 1, 1), (16, 1, 1)).unwrap();
        let b = KernelId::new("vectorAdd", (256, 1, 1), (32, 1, 1)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn kernel_id_rejects_bad_input() {
        assert_eq!(
            KernelId::new("", (1, 1, 1), (1, 1, 1)),
            Err(ModelError::EmptyFunctionName)
        );
        assert!(matches!(
            KernelId::new("k", (0, 1, 1), (1, 1, 1)),
            Err(ModelError::ZeroDimension { which: "block", .. })
        ));
        assert!(matches!(
            KernelId::new("k", (1, 1, 1), (1, 0, 1)),
            Err(ModelError::ZeroDimension { which: "grid", .. })
        ));
        assert!(KernelId::new("a\tb", (1, 1, 1), (1, 1, 1)).is_err());
    }

    #[test]
    fn single_kernel_run_is_valid() {
        let key = TaskKey::new("svc", ["--x"]).unwrap();
        let run = RunTrace::new(
            key,
            1,
            vec![KernelInvocation {
                kernel_id: kid("k", 1),
                exec_time: TimeUs(100),
                idle_after: None,
            }],
        );
        assert_eq!(run.validate(), Ok(()));
        assert_eq!(run.base_jct(), TimeUs(100));
    }

    #[test]
    fn trailing_gap_is_rejected_at_last_index() {
        let key = TaskKey::new("svc", Vec::<String>::new()).unwrap();
        let invocations = (0..3)
            .map(|i| KernelInvocation {
                kernel_id: kid("k", i + 1),
                exec_time: TimeUs(10),
                idle_after: Some(TimeUs(5)),
            })
            .collect();
        let run = RunTrace::new(key, 1, invocations);
        assert_eq!(
            run.validate(),
            Err(TraceError::UnexpectedIdleAfter { index: 3 })
        );
    }

    #[test]
    fn missing_gap_is_rejected_at_first_bad_index() {
        let key = TaskKey::new("svc", Vec::<String>::new()).unwrap();
        let mk = |idle| KernelInvocation {
            kernel_id: kid("k", 1),
            exec_time: TimeUs(10),
            idle_after: idle,
        };
        let run = RunTrace::new(
            key,
            1,
            vec![mk(None), mk(Some(TimeUs(5))), mk(None)],
        );
        assert_eq!(run.validate(), Err(TraceError::MissingIdleAfter { index: 1 }));
    }

    #[test]
    fn exactly_one_gap_pattern_is_valid_for_three_kernels() {
        // Enumerate all 2^3 gap-presence patterns; only (gap, gap, none) may
        // validate.
        let key = TaskKey::new("svc", Vec::<String>::new()).unwrap();
        for mask in 0u8..8 {
            let invocations = (0..3)
                .map(|i| KernelInvocation {
                    kernel_id: kid("k", i + 1),
                    exec_time: TimeUs(10),
                    idle_after: if mask & (1 << i) != 0 {
                        Some(TimeUs(5))
                    } else {
                        None
                    },
                })
                .collect();
            let run = RunTrace::new(key.clone(), 1, invocations);
            let expect_ok = mask == 0b011;
            assert_eq!(run.validate().is_ok(), expect_ok, "mask {mask:03b}");
        }
    }

    #[test]
    fn gap_count_matches_kernel_count() {
        let key = TaskKey::new("svc", Vec::<String>::new()).unwrap();
        for n in 1..20 {
            let invocations = (0..n)
                .map(|i| KernelInvocation {
                    kernel_id: kid("k", i as u32 + 1),
                    exec_time: TimeUs(10),
                    idle_after: if i + 1 < n { Some(TimeUs(5)) } else { None },
                })
                .collect();
            let run = RunTrace::new(key.clone(), 1, invocations);
            run.validate().unwrap();
            let gaps = run
                .invocations
                .iter()
                .filter(|inv| inv.idle_after.is_some())
                .count();
            assert_eq!(gaps, n - 1);
        }
    }

    #[test]
    fn canonical_key_roundtrips_awkward_text() {
        let cases = vec![
            TaskKey::new("svc", Vec::<String>::new()).unwrap(),
            TaskKey::new("", Vec::<String>::new()).unwrap(),
            TaskKey::new("a|b:c", ["", "1:2|3", "--flag=x y", "ünïcode"]).unwrap(),
            TaskKey::new("tabs\tinside", ["\t", "9:"]).unwrap(),
        ];
        for key in cases {
            let parsed = TaskKey::parse_canonical(&key.canonical()).unwrap();
            assert_eq!(parsed, key);
        }
    }

    #[test]
    fn canonical_parse_rejects_garbage() {
        assert!(TaskKey::parse_canonical("").is_err());
        assert!(TaskKey::parse_canonical("x:abc").is_err());
        assert!(TaskKey::parse_canonical("5:ab").is_err());
        assert!(TaskKey::parse_canonical("3:abc|").is_err());
        assert!(TaskKey::parse_canonical("3:abc;2:hi").is_err());
    }

    #[test]
    fn task_key_rejects_newlines() {
        assert!(TaskKey::new("a\nb", Vec::<String>::new()).is_err());
        assert!(TaskKey::new("ok", ["bad\rarg"]).is_err());
    }

    #[test]
    fn scale_rounds_ties_up() {
        assert_eq!(TimeUs(1).scale_milli(1500), TimeUs(2)); // 1.5 -> 2
        assert_eq!(TimeUs(3).scale_milli(500), TimeUs(2)); // 1.5 -> 2
        assert_eq!(TimeUs(1).scale_milli(1499), TimeUs(1)); // 1.499 -> 1
        assert_eq!(TimeUs(10_000).scale_milli(1700), TimeUs(17_000));
        assert_eq!(TimeUs(7).scale_ppm(500_000), TimeUs(4)); // 3.5 -> 4
        assert_eq!(TimeUs(0).scale_milli(2000), TimeUs(0));
    }

    #[test]
    fn priority_ordering_and_bounds() {
        assert!(Priority::new(10).is_err());
        let p1 = Priority::new(1).unwrap();
        let p5 = Priority::new(5).unwrap();
        assert!(p1.outranks(p5));
        assert!(!p5.outranks(p5));
        assert_eq!(Priority::LOWEST.next_lower(), None);
        assert_eq!(p1.next_lower(), Some(Priority::new(2).unwrap()));
    }

    #[test]
    fn trace_file_roundtrip() {
        let key = TaskKey::new("svc a", ["--model", "res net|50"]).unwrap();
        let runs: Vec<RunTrace> = (1..=3)
            .map(|r| {
                RunTrace::new(
                    key.clone(),
                    r,
                    (0..4)
                        .map(|i| KernelInvocation {
                            kernel_id: kid(&format!("k{i}"), i + 1),
                            exec_time: TimeUs(1000 + i as u64),
                            idle_after: if i < 3 { Some(TimeUs(30 * i as u64)) } else { None },
                        })
                        .collect(),
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_trace_file(&mut buf, &key, &runs).unwrap();
        let (parsed_key, parsed_runs) = read_trace_file(&buf[..]).unwrap();
        assert_eq!(parsed_key, key);
        assert_eq!(parsed_runs, runs);
    }

    #[test]
    fn trace_file_rejects_malformed_lines() {
        let key = TaskKey::new("svc", Vec::<String>::new()).unwrap();
        let header = format!("{TRACE_MAGIC} {TRACE_VERSION} {}\n", key.canonical());

        let bad_field_count = format!("{header}1\t1\tk\t1\t1\t1\t1\t1\t1\t100\n");
        assert!(read_trace_file(bad_field_count.as_bytes()).is_err());

        let bad_number = format!("{header}1\t1\tk\t1\t1\t1\t1\t1\t1\tabc\t-\n");
        assert!(read_trace_file(bad_number.as_bytes()).is_err());

        let zero_dim = format!("{header}1\t1\tk\t0\t1\t1\t1\t1\t1\t100\t-\n");
        assert!(read_trace_file(zero_dim.as_bytes()).is_err());

        let bad_seq = format!("{header}1\t2\tk\t1\t1\t1\t1\t1\t1\t100\t-\n");
        assert!(read_trace_file(bad_seq.as_bytes()).is_err());

        let gap_on_last = format!("{header}1\t1\tk\t1\t1\t1\t1\t1\t1\t100\t7\n");
        assert!(matches!(
            read_trace_file(gap_on_last.as_bytes()),
            Err(TraceFileError::InvalidRun { .. })
        ));

        assert!(read_trace_file("nonsense\n".as_bytes()).is_err());
        assert!(read_trace_file("".as_bytes()).is_err());
    }

    #[test]
    fn file_stem_is_filesystem_safe() {
        let key = TaskKey::new("svc/a b", ["--x=1/2"]).unwrap();
        let stem = key.file_stem();
        assert!(stem
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-%".contains(c)));
    }
}
