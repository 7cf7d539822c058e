//! Host telemetry: VM discovery, thread classification, proc parsing and the
//! ring-buffered collector hierarchy.

mod classify;
mod collector;
mod ring;
mod schedstat;
mod source;

use std::collections::BTreeMap;

use thiserror::Error;

pub use classify::{classify_thread, ThreadClassifier, DEFAULT_VCPU_PATTERN};
pub use collector::{
    discover_vms, vm_name_from_cmdline, ClassSample, Collector, DiscoveryConfig, SystemSample,
    ThreadInfo, VmRecord, DEFAULT_MARKER, DEFAULT_RING_CAPACITY,
};
pub use ring::RingBuffer;
pub use schedstat::{parse_schedstat, RawSchedstat};
pub use source::{core_utilization, parse_proc_stat, CpuTimes, ProcFs, SourceError, TelemetrySource};

use crate::{CoreId, Tid};

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("malformed schedstat line {0:?}")]
    MalformedSchedstat(String),
    #[error("malformed stat line {0:?}")]
    MalformedStat(String),
    #[error("invalid thread pattern: {0}")]
    InvalidPattern(String),
    #[error("{0}")]
    SourceUnavailable(String),
}

/// Everything read in one collection pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TelemetrySnapshot {
    pub timestamp_ns: u64,
    pub per_thread: BTreeMap<Tid, RawSchedstat>,
    /// Empty on the first pass (no delta baseline yet).
    pub per_core_util: BTreeMap<CoreId, f64>,
    /// Threads that exited between listing and reading.
    pub gone: Vec<Tid>,
}
