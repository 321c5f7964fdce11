//! Priority-based GPU multi-task scheduling with inter-kernel gap filling.
//!
//! The crate profiles per-kernel execution and inter-kernel idle statistics
//! from exclusive-mode run traces, then schedules concurrent prioritized
//! tasks on a simulated GPU device, filling a high-priority task's idle gaps
//! with best-fitting lower-priority kernels. Runtime feedback bounds the
//! cost of gap-prediction error. A datagram control protocol mirrors the
//! distributed hook-client / central-scheduler split, and the harness
//! reproduces the evaluation scenarios on synthetic workloads.

pub mod device_sim;
pub mod harness;
pub mod kernel_model;
pub mod profiler;
pub mod scheduler;
pub mod wire;

pub use device_sim::{
    jct_speedup, perturb_durations, run_simulation, DecisionLog, JctReport, SimConfig, SimOutcome,
    SimTask,
};
pub use harness::{
    emit_report, generate_workload, parse_config, run_experiment, ExperimentConfig,
    ExperimentReport, ReportFormat, WorkloadSpec,
};
pub use kernel_model::{
    Dim3, KernelId, KernelInvocation, ModelError, Priority, RunTrace, TaskKey, TimeUs, TraceError,
    PRIORITY_LEVELS,
};
pub use profiler::{build_profile, AmortizationModel, Profile, ProfileStore};
pub use scheduler::{
    ClientId, DecisionKind, Dispatch, KernelRequest, SchedMode, Scheduler, SchedulerConfig,
};
