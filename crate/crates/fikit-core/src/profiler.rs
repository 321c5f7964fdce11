//! Measurement-phase profiling: per-kernel-id execution and idle statistics
//! aggregated over repeated exclusive runs, the measurement-overhead model,
//! and the amortized-JCT analysis that justifies paying for measurement once
//! and scheduling from the stored statistics ever after.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kernel_model::{
    div_round_half_up, KernelId, ModelError, RunTrace, TaskKey, TimeUs, TraceError,
};

/// Default wall-clock inflation of a measurement run, in thousandths.
pub const DEFAULT_MEASUREMENT_OVERHEAD_MILLI: u64 = 1500;
/// Accepted configuration range for the measurement overhead ratio.
pub const MEASUREMENT_OVERHEAD_RANGE_MILLI: (u64, u64) = (1000, 2000);
/// Recommended number of measurement runs; values outside log a warning.
pub const RECOMMENDED_T_RUNS: (u32, u32) = (10, 1000);

/// Magic token on the first line of a persisted profile.
pub const PROFILE_MAGIC: &str = "fikit-profile";
/// Profile format version token.
pub const PROFILE_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("cannot build a profile from zero runs")]
    EmptyRuns,
    #[error("run {run_index} belongs to task {found}, expected {expected}")]
    MixedTaskKeys {
        run_index: u32,
        expected: String,
        found: String,
    },
    #[error("run {run_index} is invalid: {source}")]
    InvalidTrace {
        run_index: u32,
        #[source]
        source: TraceError,
    },
    #[error("overhead ratio {milli}/1000 is below 1.0")]
    OverheadBelowOne { milli: u64 },
    #[error("amortization model needs at least one run")]
    ZeroTotalRuns,
    #[error("measurement run count {n_measure} exceeds total {n_total}")]
    MeasureExceedsTotal { n_measure: u64, n_total: u64 },
    #[error("jct_f must be positive")]
    ZeroFikitJct,
    #[error("jct_m {jct_m} is below jct_f {jct_f}, overhead ratio would be < 1")]
    MeasurementFasterThanFikit { jct_m: TimeUs, jct_f: TimeUs },
}

/// Per-task statistics from the measurement phase: for every kernel id
/// observed across `t_runs` exclusive runs, the mean execution time, and the
/// mean idle gap that followed it (absent when the id only ever appeared as
/// the final kernel of a run).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Profile {
    task_key: TaskKey,
    t_runs: u32,
    mean_exec: BTreeMap<KernelId, TimeUs>,
    mean_idle: BTreeMap<KernelId, TimeUs>,
    idle_samples: BTreeMap<KernelId, u64>,
}

impl Profile {
    pub fn task_key(&self) -> &TaskKey {
        &self.task_key
    }

    pub fn t_runs(&self) -> u32 {
        self.t_runs
    }

    /// The set of unique kernel ids observed, in canonical order.
    pub fn unique_ids(&self) -> impl Iterator<Item = &KernelId> {
        self.mean_exec.keys()
    }

    pub fn unique_id_count(&self) -> usize {
        self.mean_exec.len()
    }

    /// Mean execution time of the kernel id across all its invocations.
    pub fn mean_exec(&self, id: &KernelId) -> Option<TimeUs> {
        self.mean_exec.get(id).copied()
    }

    /// Mean idle gap after the kernel id, over non-final invocations only.
    pub fn mean_idle(&self, id: &KernelId) -> Option<TimeUs> {
        self.mean_idle.get(id).copied()
    }

    /// Number of gap samples behind the `mean_idle` entry (0 when absent).
    pub fn idle_sample_count(&self, id: &KernelId) -> u64 {
        self.idle_samples.get(id).copied().unwrap_or(0)
    }

    /// Assemble a profile from already-computed statistics, e.g. a parsed
    /// store record. Entries are (id, mean exec, mean idle, idle samples);
    /// the idle mean must be present exactly when the sample count is
    /// positive.
    pub fn from_parts(
        task_key: TaskKey,
        t_runs: u32,
        entries: impl IntoIterator<Item = (KernelId, TimeUs, Option<TimeUs>, u64)>,
    ) -> Profile {
        let mut mean_exec = BTreeMap::new();
        let mut mean_idle = BTreeMap::new();
        let mut idle_samples = BTreeMap::new();
        for (id, sk, sg, count) in entries {
            debug_assert_eq!(sg.is_some(), count > 0);
            if let Some(sg) = sg {
                mean_idle.insert(id.clone(), sg);
            }
            idle_samples.insert(id.clone(), count);
            mean_exec.insert(id, sk);
        }
        Profile {
            task_key,
            t_runs,
            mean_exec,
            mean_idle,
            idle_samples,
        }
    }

    /// Write the versioned text record: magic line, key and run count, then
    /// one tab-separated line per kernel id with mean exec, mean idle (`-`
    /// when no gap sample exists), and the idle sample count.
    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{PROFILE_MAGIC} {PROFILE_VERSION}")?;
        writeln!(w, "key\t{}", self.task_key.canonical())?;
        writeln!(w, "runs\t{}", self.t_runs)?;
        for (id, sk) in &self.mean_exec {
            let sg = match self.mean_idle.get(id) {
                Some(t) => t.to_string(),
                None => "-".to_string(),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                id.function_name(),
                id.block_dim().x,
                id.block_dim().y,
                id.block_dim().z,
                id.grid_dim().x,
                id.grid_dim().y,
                id.grid_dim().z,
                sk,
                sg,
                self.idle_sample_count(id)
            )?;
        }
        Ok(())
    }

    /// Parse a record produced by [`Profile::write_text`].
    pub fn read_text<R: BufRead>(r: R) -> Result<Profile, StoreError> {
        let mut lines = r.lines();
        let bad = |line: usize, reason: &str| StoreError::Format {
            line,
            reason: reason.to_string(),
        };
        let magic = lines.next().ok_or_else(|| bad(1, "empty profile"))??;
        if magic != format!("{PROFILE_MAGIC} {PROFILE_VERSION}") {
            return Err(bad(1, "bad magic or version"));
        }
        let key_line = lines.next().ok_or_else(|| bad(2, "missing key line"))??;
        let canonical = key_line
            .strip_prefix("key\t")
            .ok_or_else(|| bad(2, "missing key line"))?;
        let task_key = TaskKey::parse_canonical(canonical)?;
        let runs_line = lines.next().ok_or_else(|| bad(3, "missing runs line"))??;
        let t_runs: u32 = runs_line
            .strip_prefix("runs\t")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(3, "missing or bad runs line"))?;

        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 4;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 10 {
                return Err(bad(lineno, "expected 10 tab-separated fields"));
            }
            let num = |s: &str| -> Result<u64, StoreError> {
                s.parse().map_err(|_| bad(lineno, "bad numeric field"))
            };
            let id = KernelId::new(
                fields[0],
                (num(fields[1])? as u32, num(fields[2])? as u32, num(fields[3])? as u32),
                (num(fields[4])? as u32, num(fields[5])? as u32, num(fields[6])? as u32),
            )?;
            let sk = TimeUs(num(fields[7])?);
            let sg = if fields[8] == "-" {
                None
            } else {
                Some(TimeUs(num(fields[8])?))
            };
            let count = num(fields[9])?;
            if sg.is_some() != (count > 0) {
                return Err(bad(lineno, "idle mean and sample count disagree"));
            }
            entries.push((id, sk, sg, count));
        }
        Ok(Profile::from_parts(task_key, t_runs, entries))
    }
}

/// Aggregate per-kernel-id statistics over a set of measurement runs.
///
/// The mean execution time of id `j` averages every invocation of `j`
/// across all runs; the mean idle averages the trailing gap of every
/// non-final invocation of `j`. Means round to the nearest microsecond with
/// ties up.
pub fn build_profile(task_key: &TaskKey, runs: &[RunTrace]) -> Result<Profile, ProfileError> {
    if runs.is_empty() {
        return Err(ProfileError::EmptyRuns);
    }
    let t = runs.len() as u32;
    if t < RECOMMENDED_T_RUNS.0 || t > RECOMMENDED_T_RUNS.1 {
        log::warn!(
            "building profile for {} from {} runs; {}..={} recommended",
            task_key.canonical(),
            t,
            RECOMMENDED_T_RUNS.0,
            RECOMMENDED_T_RUNS.1
        );
    }

    let mut exec_acc: BTreeMap<KernelId, (u128, u64)> = BTreeMap::new();
    let mut idle_acc: BTreeMap<KernelId, (u128, u64)> = BTreeMap::new();
    for run in runs {
        if run.task_key != *task_key {
            return Err(ProfileError::MixedTaskKeys {
                run_index: run.run_index,
                expected: task_key.canonical(),
                found: run.task_key.canonical(),
            });
        }
        run.validate().map_err(|source| ProfileError::InvalidTrace {
            run_index: run.run_index,
            source,
        })?;
        for inv in &run.invocations {
            let e = exec_acc.entry(inv.kernel_id.clone()).or_insert((0, 0));
            e.0 += inv.exec_time.as_u64() as u128;
            e.1 += 1;
            if let Some(gap) = inv.idle_after {
                let g = idle_acc.entry(inv.kernel_id.clone()).or_insert((0, 0));
                g.0 += gap.as_u64() as u128;
                g.1 += 1;
            }
        }
    }

    let mean_exec: BTreeMap<KernelId, TimeUs> = exec_acc
        .into_iter()
        .map(|(id, (sum, count))| (id, TimeUs(div_round_half_up(sum, count as u128))))
        .collect();
    let mut mean_idle = BTreeMap::new();
    let mut idle_samples: BTreeMap<KernelId, u64> =
        mean_exec.keys().map(|id| (id.clone(), 0)).collect();
    for (id, (sum, count)) in idle_acc {
        mean_idle.insert(id.clone(), TimeUs(div_round_half_up(sum, count as u128)));
        idle_samples.insert(id, count);
    }

    Ok(Profile {
        task_key: task_key.clone(),
        t_runs: t,
        mean_exec,
        mean_idle,
        idle_samples,
    })
}

/// Replay one exclusive measurement run.
///
/// Measurement observes the true durations, so the returned trace is the
/// input unchanged; the wall clock the task experienced is the trace's solo
/// JCT inflated by the overhead ratio. The seed is reserved for jittered
/// overhead models and does not affect the current multiplicative model.
pub fn simulate_measurement_run(
    base: &RunTrace,
    overhead_milli: u64,
    _seed: u64,
) -> Result<(RunTrace, TimeUs), ProfileError> {
    if overhead_milli < 1000 {
        return Err(ProfileError::OverheadBelowOne {
            milli: overhead_milli,
        });
    }
    let wall_clock = base.base_jct().scale_milli(overhead_milli);
    Ok((base.clone(), wall_clock))
}

/// Two-phase amortization: `n_measure` runs pay the measurement overhead,
/// the remaining runs complete at the shared-phase JCT, and the average
/// converges to the shared-phase JCT as the measured fraction vanishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmortizationModel {
    jct_m: TimeUs,
    jct_f: TimeUs,
    overhead_milli: u64,
    n_total: u64,
    n_measure: u64,
    n_fikit: u64,
}

impl AmortizationModel {
    /// Build from measured phase means. The overhead ratio is derived as
    /// `jct_m / jct_f` and must be at least 1.
    pub fn new(
        jct_m: TimeUs,
        jct_f: TimeUs,
        n_total: u64,
        n_measure: u64,
    ) -> Result<AmortizationModel, ProfileError> {
        if n_total == 0 {
            return Err(ProfileError::ZeroTotalRuns);
        }
        if n_measure > n_total {
            return Err(ProfileError::MeasureExceedsTotal { n_measure, n_total });
        }
        if jct_f.is_zero() {
            return Err(ProfileError::ZeroFikitJct);
        }
        if jct_m < jct_f {
            return Err(ProfileError::MeasurementFasterThanFikit { jct_m, jct_f });
        }
        let overhead_milli = div_round_half_up(
            jct_m.as_u64() as u128 * 1000,
            jct_f.as_u64() as u128,
        );
        Ok(AmortizationModel {
            jct_m,
            jct_f,
            overhead_milli,
            n_total,
            n_measure,
            n_fikit: n_total - n_measure,
        })
    }

    /// Build from a configured overhead ratio, deriving `jct_m`.
    pub fn from_overhead(
        jct_f: TimeUs,
        overhead_milli: u64,
        n_total: u64,
        n_measure: u64,
    ) -> Result<AmortizationModel, ProfileError> {
        if overhead_milli < 1000 {
            return Err(ProfileError::OverheadBelowOne {
                milli: overhead_milli,
            });
        }
        AmortizationModel::new(jct_f.scale_milli(overhead_milli), jct_f, n_total, n_measure)
    }

    pub fn jct_m(&self) -> TimeUs {
        self.jct_m
    }

    pub fn jct_f(&self) -> TimeUs {
        self.jct_f
    }

    pub fn overhead_milli(&self) -> u64 {
        self.overhead_milli
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn n_measure(&self) -> u64 {
        self.n_measure
    }

    pub fn n_fikit(&self) -> u64 {
        self.n_fikit
    }

    /// Mean JCT over all runs:
    /// `(n_measure * jct_m + n_fikit * jct_f) / n_total`.
    pub fn amortized_jct(&self) -> TimeUs {
        let num = self.n_measure as u128 * self.jct_m.as_u64() as u128
            + self.n_fikit as u128 * self.jct_f.as_u64() as u128;
        TimeUs(div_round_half_up(num, self.n_total as u128))
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no profile stored for task {key}")]
    NotFound { key: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("profile record line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Directory-backed profile store keyed by canonical task key. Writes go
/// through a temp file and a rename, so concurrent readers of the same key
/// always see a complete record.
#[derive(Debug, Clone)]
pub struct ProfileStore {
    root: PathBuf,
}

impl ProfileStore {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<ProfileStore> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ProfileStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &TaskKey) -> PathBuf {
        self.root.join(format!("{}.profile", key.file_stem()))
    }

    pub fn save(&self, profile: &Profile) -> Result<PathBuf, StoreError> {
        let path = self.path_for(profile.task_key());
        let tmp = path.with_extension("profile.tmp");
        let mut buf = Vec::new();
        profile.write_text(&mut buf)?;
        fs::write(&tmp, &buf)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Load the profile for a task key. A missing record is a distinct
    /// signal: the caller routes the task to the measurement phase.
    pub fn load(&self, key: &TaskKey) -> Result<Profile, StoreError> {
        let path = self.path_for(key);
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound {
                    key: key.canonical(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        Profile::read_text(io::BufReader::new(file))
    }

    pub fn contains(&self, key: &TaskKey) -> bool {
        self.path_for(key).exists()
    }

    /// Load every profile record in the store, in path order.
    pub fn load_all(&self) -> Result<Vec<Profile>, StoreError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.root)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "profile"))
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| Profile::read_text(io::BufReader::new(fs::File::open(p)?)))
            .collect()
    }
}
