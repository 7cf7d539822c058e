//! Adaptive CPU affinity control for the emulator threads of KVM guests.
//!
//! The crate is split along the path a single control decision takes:
//!
//! * [`telemetry`] discovers QEMU processes, classifies their threads and turns
//!   `schedstat` / `stat` readings into ring-buffered per-VM history.
//! * [`metrics`] derives the emulator ratio, run-delay rates and utilization
//!   disparity, and flags anomalous changes.
//! * [`controller`] is the four-state machine that shrinks each VM's emulator
//!   core set by binary search on the run-delay curve.
//! * [`actuator`] applies the resulting bindings (cgroup cpuset, per-thread
//!   affinity, or the simulator).
//! * [`simkvm`] is a deterministic fluid model of co-located VMs that speaks the
//!   same proc text format, so the whole loop runs without a hypervisor.
//! * [`strategy`] describes the static strategy space: canonical forms under
//!   core relabelling, exhaustive enumeration and the closed-form count.

pub mod actuator;
pub mod config;
pub mod controller;
pub mod cpulist;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod simkvm;
pub mod strategy;
pub mod telemetry;
mod types;

pub use types::{CoreId, CoreSet, CoreType, Pid, ThreadClass, Tid, VmId};
