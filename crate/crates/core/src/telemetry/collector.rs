use std::collections::BTreeMap;

use log::{debug, warn};

use super::classify::ThreadClassifier;
use super::ring::RingBuffer;
use super::schedstat::{parse_schedstat, RawSchedstat};
use super::source::{core_utilization, parse_proc_stat, CpuTimes, SourceError, TelemetrySource};
use super::{TelemetryError, TelemetrySnapshot};
use crate::{CoreId, Pid, ThreadClass, Tid, VmId};

/// Default history length: two minutes at one sample per second.
pub const DEFAULT_RING_CAPACITY: usize = 120;
/// Default command-line marker identifying hypervisor processes.
pub const DEFAULT_MARKER: &str = "qemu-system";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadInfo {
    pub tid: Tid,
    pub name: String,
    pub class: ThreadClass,
}

/// Which processes count as VMs and how their threads are classified.
#[derive(Debug, Clone)]
pub struct DiscoveryConfig {
    /// Substring searched for in each process command line.
    pub marker: String,
    /// Extra processes to monitor regardless of the marker, by pid or VM name.
    pub allow: Vec<String>,
    pub classifier: ThreadClassifier,
    pub ring_capacity: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            marker: DEFAULT_MARKER.to_string(),
            allow: Vec::new(),
            classifier: ThreadClassifier::default(),
            ring_capacity: DEFAULT_RING_CAPACITY,
        }
    }
}

/// Per-class aggregate of one collection pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSample {
    pub timestamp_ns: u64,
    /// Sum of the per-thread counters, corrected for resets and exits so that
    /// the aggregate never decreases.
    pub stat: RawSchedstat,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct ThreadCounters {
    last: RawSchedstat,
    acc: RawSchedstat,
}

/// One monitored VM: its threads, their counter baselines and per-class history.
#[derive(Debug, Clone)]
pub struct VmRecord {
    pub vm_id: VmId,
    pub pid: Pid,
    threads: BTreeMap<Tid, ThreadInfo>,
    counters: BTreeMap<Tid, ThreadCounters>,
    retired: [RawSchedstat; 2],
    vcpu_history: RingBuffer<ClassSample>,
    emulator_history: RingBuffer<ClassSample>,
    counter_resets: u64,
}

fn class_index(class: ThreadClass) -> usize {
    match class {
        ThreadClass::Vcpu => 0,
        ThreadClass::Emulator => 1,
    }
}

impl VmRecord {
    pub fn new(
        vm_id: VmId,
        pid: Pid,
        threads: impl IntoIterator<Item = ThreadInfo>,
        ring_capacity: usize,
    ) -> Self {
        VmRecord {
            vm_id,
            pid,
            threads: threads.into_iter().map(|t| (t.tid, t)).collect(),
            counters: BTreeMap::new(),
            retired: [RawSchedstat::default(); 2],
            vcpu_history: RingBuffer::new(ring_capacity),
            emulator_history: RingBuffer::new(ring_capacity),
            counter_resets: 0,
        }
    }

    pub fn threads(&self) -> impl Iterator<Item = &ThreadInfo> {
        self.threads.values()
    }

    pub fn thread(&self, tid: Tid) -> Option<&ThreadInfo> {
        self.threads.get(&tid)
    }

    pub fn tids(&self, class: ThreadClass) -> Vec<Tid> {
        self.threads
            .values()
            .filter(|t| t.class == class)
            .map(|t| t.tid)
            .collect()
    }

    pub fn thread_count(&self, class: ThreadClass) -> usize {
        self.threads.values().filter(|t| t.class == class).count()
    }

    pub fn history(&self, class: ThreadClass) -> &RingBuffer<ClassSample> {
        match class {
            ThreadClass::Vcpu => &self.vcpu_history,
            ThreadClass::Emulator => &self.emulator_history,
        }
    }

    /// Number of decreasing-counter events seen on this VM's threads.
    pub fn counter_resets(&self) -> u64 {
        self.counter_resets
    }

    /// Replaces the thread set. Threads that left keep their accumulated
    /// counters in the class aggregate.
    pub fn set_threads(&mut self, threads: impl IntoIterator<Item = ThreadInfo>) {
        let new: BTreeMap<Tid, ThreadInfo> = threads.into_iter().map(|t| (t.tid, t)).collect();
        let departed: Vec<Tid> = self
            .threads
            .keys()
            .filter(|tid| !new.contains_key(tid))
            .copied()
            .collect();
        for tid in departed {
            let info = self.threads.remove(&tid).expect("present");
            if let Some(c) = self.counters.remove(&tid) {
                self.retired[class_index(info.class)] += c.acc;
            }
        }
        self.threads = new;
    }

    /// Folds one pass of readings into the counters and appends a sample per
    /// class. Timestamps that do not advance are ignored.
    fn ingest(&mut self, timestamp_ns: u64, per_thread: &BTreeMap<Tid, RawSchedstat>) {
        if let Some(last) = self.vcpu_history.latest() {
            if timestamp_ns <= last.timestamp_ns {
                debug!("{}: non-increasing timestamp {timestamp_ns}", self.vm_id);
                return;
            }
        }
        for tid in self.threads.keys() {
            let Some(reading) = per_thread.get(tid) else { continue };
            match self.counters.get_mut(tid) {
                None => {
                    self.counters.insert(
                        *tid,
                        ThreadCounters {
                            last: *reading,
                            acc: RawSchedstat::default(),
                        },
                    );
                }
                Some(c) if reading.regressed_from(&c.last) => {
                    warn!("{}: counter reset on tid {tid}", self.vm_id);
                    self.counter_resets += 1;
                    c.last = *reading;
                }
                Some(c) => {
                    c.acc += reading.saturating_sub(&c.last);
                    c.last = *reading;
                }
            }
        }
        for class in [ThreadClass::Vcpu, ThreadClass::Emulator] {
            let mut stat = self.retired[class_index(class)];
            let mut threads = 0;
            for info in self.threads.values().filter(|t| t.class == class) {
                threads += 1;
                if let Some(c) = self.counters.get(&info.tid) {
                    stat += c.acc;
                }
            }
            let sample = ClassSample {
                timestamp_ns,
                stat,
                threads,
            };
            match class {
                ThreadClass::Vcpu => self.vcpu_history.push(sample),
                ThreadClass::Emulator => self.emulator_history.push(sample),
            };
        }
    }
}

/// Extracts the guest name from a QEMU command line (`-name guest=web,...` or
/// `-name web`).
pub fn vm_name_from_cmdline(cmdline: &str) -> Option<String> {
    let mut tokens = cmdline.split_whitespace();
    while let Some(tok) = tokens.next() {
        if tok == "-name" || tok == "--name" {
            let arg = tokens.next()?;
            for part in arg.split(',') {
                if let Some(v) = part.strip_prefix("guest=") {
                    return Some(v.to_string()).filter(|s| !s.is_empty());
                }
            }
            let first = arg.split(',').next()?;
            if !first.contains('=') && !first.is_empty() {
                return Some(first.to_string());
            }
            return None;
        }
    }
    None
}

fn classify_threads<S: TelemetrySource + ?Sized>(
    source: &S,
    pid: Pid,
    classifier: &ThreadClassifier,
) -> Result<Vec<ThreadInfo>, SourceError> {
    let mut out = Vec::new();
    for tid in source.tasks(pid)? {
        match source.comm(pid, tid) {
            Ok(name) => out.push(ThreadInfo {
                tid,
                class: classifier.classify(&name),
                name,
            }),
            Err(SourceError::Gone(_)) => debug!("tid {tid} of {pid} vanished during scan"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Finds every VM process visible through `source`.
///
/// A process qualifies when its command line contains the configured marker or
/// when its pid or VM name is allow-listed. The VM id is the guest name when
/// the command line carries one, the pid otherwise. Threads that exit while
/// being scanned are left out silently.
pub fn discover_vms<S: TelemetrySource + ?Sized>(
    source: &S,
    config: &DiscoveryConfig,
) -> Result<Vec<VmRecord>, TelemetryError> {
    let pids = source.processes().map_err(unavailable)?;
    let mut found: Vec<(VmId, Pid, Vec<ThreadInfo>)> = Vec::new();
    for pid in pids {
        let cmdline = match source.cmdline(pid) {
            Ok(c) => c,
            Err(SourceError::Gone(_)) => continue,
            Err(e) => return Err(unavailable(e)),
        };
        let name = vm_name_from_cmdline(&cmdline);
        let pid_text = pid.to_string();
        let allowed = config
            .allow
            .iter()
            .any(|a| *a == pid_text || Some(a) == name.as_ref());
        let marked = !config.marker.is_empty() && cmdline.contains(&config.marker);
        if !(allowed || marked) {
            continue;
        }
        let threads = match classify_threads(source, pid, &config.classifier) {
            Ok(t) => t,
            Err(SourceError::Gone(_)) => continue,
            Err(e) => return Err(unavailable(e)),
        };
        let id = VmId(name.unwrap_or(pid_text));
        found.push((id, pid, threads));
    }
    let mut seen: BTreeMap<VmId, usize> = BTreeMap::new();
    for (id, _, _) in &found {
        *seen.entry(id.clone()).or_default() += 1;
    }
    let mut vms: Vec<VmRecord> = found
        .into_iter()
        .map(|(id, pid, threads)| {
            let id = if seen[&id] > 1 {
                VmId(format!("{id}-{pid}"))
            } else {
                id
            };
            VmRecord::new(id, pid, threads, config.ring_capacity)
        })
        .collect();
    vms.sort_by(|a, b| a.vm_id.cmp(&b.vm_id));
    Ok(vms)
}

fn unavailable(e: SourceError) -> TelemetryError {
    TelemetryError::SourceUnavailable(e.to_string())
}

/// One entry of the system-level history.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSample {
    pub timestamp_ns: u64,
    pub per_core_util: BTreeMap<CoreId, f64>,
}

/// Thread → VM → system collector. Owns the VM records and all ring buffers;
/// consumers only see immutable snapshots and read-only history.
#[derive(Debug)]
pub struct Collector {
    config: DiscoveryConfig,
    vms: Vec<VmRecord>,
    prev_cpu: Option<BTreeMap<CoreId, CpuTimes>>,
    system: RingBuffer<SystemSample>,
}

impl Collector {
    pub fn new(config: DiscoveryConfig, vms: Vec<VmRecord>) -> Self {
        let system = RingBuffer::new(config.ring_capacity);
        Collector {
            config,
            vms,
            prev_cpu: None,
            system,
        }
    }

    /// Runs discovery and wraps the result.
    pub fn discover<S: TelemetrySource + ?Sized>(
        source: &S,
        config: DiscoveryConfig,
    ) -> Result<Self, TelemetryError> {
        let vms = discover_vms(source, &config)?;
        Ok(Collector::new(config, vms))
    }

    pub fn vms(&self) -> &[VmRecord] {
        &self.vms
    }

    pub fn vm(&self, id: &VmId) -> Option<&VmRecord> {
        self.vms.iter().find(|v| &v.vm_id == id)
    }

    pub fn system_history(&self) -> &RingBuffer<SystemSample> {
        &self.system
    }

    pub fn config(&self) -> &DiscoveryConfig {
        &self.config
    }

    /// One collection pass: refresh thread membership, read every thread's
    /// schedstat and the per-core counters, then fold the result into history.
    pub fn snapshot<S: TelemetrySource + ?Sized>(
        &mut self,
        source: &S,
    ) -> Result<TelemetrySnapshot, TelemetryError> {
        let timestamp_ns = source.now_ns();
        let mut per_thread = BTreeMap::new();
        let mut gone = Vec::new();
        for vm in &mut self.vms {
            match classify_threads(source, vm.pid, &self.config.classifier) {
                Ok(threads) => vm.set_threads(threads),
                Err(SourceError::Gone(_)) => {
                    debug!("vm {} (pid {}) is gone", vm.vm_id, vm.pid);
                    gone.extend(vm.threads.keys().copied());
                    continue;
                }
                Err(e) => return Err(unavailable(e)),
            }
            for tid in vm.threads.keys() {
                match source.schedstat(vm.pid, *tid) {
                    Ok(text) => match parse_schedstat(&text) {
                        Ok(stat) => {
                            per_thread.insert(*tid, stat);
                        }
                        Err(e) => warn!("tid {tid}: {e}"),
                    },
                    Err(SourceError::Gone(_)) => gone.push(*tid),
                    Err(e) => return Err(unavailable(e)),
                }
            }
        }
        let stat_text = source.stat().map_err(unavailable)?;
        let cpu = parse_proc_stat(&stat_text)?;
        let per_core_util = match &self.prev_cpu {
            Some(prev) => core_utilization(prev, &cpu),
            None => BTreeMap::new(),
        };
        self.prev_cpu = Some(cpu);
        let snap = TelemetrySnapshot {
            timestamp_ns,
            per_thread,
            per_core_util,
            gone,
        };
        self.ingest(&snap);
        Ok(snap)
    }

    /// Folds an externally produced snapshot (e.g. a recorded trace) into the
    /// VM and system history.
    pub fn ingest(&mut self, snap: &TelemetrySnapshot) {
        for vm in &mut self.vms {
            vm.ingest(snap.timestamp_ns, &snap.per_thread);
        }
        if !snap.per_core_util.is_empty() {
            let newer = self
                .system
                .latest()
                .map_or(true, |s| snap.timestamp_ns > s.timestamp_ns);
            if newer {
                self.system.push(SystemSample {
                    timestamp_ns: snap.timestamp_ns,
                    per_core_util: snap.per_core_util.clone(),
                });
            }
        }
    }

    /// Per-core utilization averaged over the newest `window` system samples.
    pub fn mean_core_utilization(&self, window: usize) -> BTreeMap<CoreId, f64> {
        let mut sums: BTreeMap<CoreId, (f64, usize)> = BTreeMap::new();
        for s in self.system.tail(window) {
            for (core, u) in &s.per_core_util {
                let e = sums.entry(*core).or_default();
                e.0 += u;
                e.1 += 1;
            }
        }
        sums.into_iter()
            .map(|(c, (s, n))| (c, s / n as f64))
            .collect()
    }
}
