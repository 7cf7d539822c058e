//! Deterministic fluid model of co-located VMs on a big/small-core host.
//!
//! Every tick each thread lays its demand over its allowed cores (see
//! [`Spread`]). A core whose total demand exceeds its capacity serves every
//! portion proportionally, so a thread's achieved rate is
//! `capacity * demand / total` there. The unmet part of the request is run
//! delay: `(requested - achieved) / requested * dt`. This is a model of queueing
//! pressure and not a CFS clone; it only aims at the qualitative shapes the
//! controller depends on.
//!
//! The simulator exposes the same proc text a host would (see
//! [`TelemetrySource`]), and accepts bindings as an [`ActuatorBackend`], so the
//! whole control loop runs against it unchanged.

mod run;
mod scenario;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use run::{
    emulator_delay_curve, run, run_baseline, run_controller, RunSummary, Trace, TraceRow, TRACE_HEADER,
};
pub use scenario::{
    reference_scenario, reference_suite, CoreSpec, LoadSetting, ModelParams, Phase, Scenario, Spread,
    ThreadGroup, VmSpec, SCENARIO_VERSION,
};

use crate::actuator::{ActuatorBackend, ActuatorError, ApplyReport, BindingRequest};
use crate::config::ConfigError;
use crate::telemetry::{RawSchedstat, SourceError, TelemetrySnapshot, TelemetrySource};
use crate::{CoreId, CoreSet, CoreType, Pid, ThreadClass, Tid, VmId};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("scenario: {0}")]
    Parse(#[from] ConfigError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("thread {0} has no allowed core")]
    UnaffinedThread(String),
    #[error("unknown vm {0}")]
    UnknownVm(VmId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimCore {
    pub id: CoreId,
    pub ty: CoreType,
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimThread {
    pub tid: Tid,
    /// Index into the scenario's VM list.
    pub vm: usize,
    pub class: ThreadClass,
    pub name: String,
    pub base_demand: f64,
}

/// Ground truth for one thread over one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreadTick {
    pub tid: Tid,
    pub vm: usize,
    pub class: ThreadClass,
    pub requested: f64,
    pub achieved: f64,
    /// Seconds of run delay accrued this tick.
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Simulated time at the end of the tick, in seconds.
    pub time: f64,
    pub threads: Vec<ThreadTick>,
    /// Served demand over capacity, per core.
    pub core_util: BTreeMap<CoreId, f64>,
    pub snapshot: TelemetrySnapshot,
}

impl StepOutput {
    /// Summed run-delay rate (ns per second) of one VM's threads of `class`.
    pub fn delay_rate(&self, vm: usize, class: ThreadClass, dt: f64) -> f64 {
        self.threads
            .iter()
            .filter(|t| t.vm == vm && t.class == class)
            .map(|t| t.delay * 1e9 / dt)
            .sum()
    }
}

/// Result of laying demands over cores.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// Achieved rate per thread, same order as the input.
    pub achieved: Vec<f64>,
    /// Requested and served demand per core.
    pub core_demand: BTreeMap<CoreId, f64>,
    pub core_served: BTreeMap<CoreId, f64>,
}

/// Proportional-share allocation of `demands` (demand, allowed cores) over
/// `cores`. Allowed cores outside `cores` are ignored; a thread with none left
/// is an error.
pub fn allocate(cores: &[SimCore], demands: &[(f64, &CoreSet)], spread: Spread) -> Result<Allocation, SimError> {
    let cap: BTreeMap<CoreId, f64> = cores.iter().map(|c| (c.id, c.capacity)).collect();
    let mut load: BTreeMap<CoreId, f64> = cap.keys().map(|c| (*c, 0.0)).collect();
    let mut portions: Vec<Vec<(CoreId, f64)>> = Vec::with_capacity(demands.len());
    for (i, (d, allowed)) in demands.iter().enumerate() {
        let usable: Vec<CoreId> = allowed.iter().copied().filter(|c| cap.contains_key(c)).collect();
        if usable.is_empty() {
            return Err(SimError::UnaffinedThread(format!("#{i}")));
        }
        let mut p = Vec::new();
        if *d > 0.0 {
            match spread {
                Spread::Equal => {
                    let share = d / usable.len() as f64;
                    for c in &usable {
                        p.push((*c, share));
                    }
                }
                Spread::Greedy => {
                    let best = usable
                        .iter()
                        .copied()
                        .min_by(|a, b| (load[a] / cap[a]).total_cmp(&(load[b] / cap[b])).then(a.cmp(b)))
                        .expect("non-empty");
                    p.push((best, *d));
                }
            }
            for (c, s) in &p {
                *load.get_mut(c).expect("known core") += s;
            }
        }
        portions.push(p);
    }
    let scale: BTreeMap<CoreId, f64> = load
        .iter()
        .map(|(c, l)| (*c, if *l > cap[c] { cap[c] / l } else { 1.0 }))
        .collect();
    let achieved = portions
        .iter()
        .map(|p| p.iter().map(|(c, s)| s * scale[c]).sum())
        .collect();
    let core_served = load.iter().map(|(c, l)| (*c, l * scale[c])).collect();
    Ok(Allocation {
        achieved,
        core_demand: load,
        core_served,
    })
}

/// Per-core counters in `/proc/stat` advance by this many units per second.
pub const STAT_UNITS_PER_SEC: f64 = 1.0e6;

fn pid_of(vm: usize) -> Pid {
    1000 * (vm as Pid + 1)
}

#[derive(Debug, Clone)]
pub struct Simulator {
    scenario: Scenario,
    cores: Vec<SimCore>,
    threads: Vec<SimThread>,
    affinity: BTreeMap<Tid, CoreSet>,
    counters: BTreeMap<Tid, RawSchedstat>,
    /// Cumulative (busy, idle) stat units per core.
    stat: BTreeMap<CoreId, (u64, u64)>,
    ticks: u64,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let c = &scenario.cores;
        let cores: Vec<SimCore> = c
            .small_cores()
            .into_iter()
            .map(|id| SimCore {
                id,
                ty: CoreType::Small,
                capacity: c.small_capacity,
            })
            .chain(c.big_cores().into_iter().map(|id| SimCore {
                id,
                ty: CoreType::Big,
                capacity: c.big_capacity,
            }))
            .collect();
        let mut threads = Vec::new();
        let mut affinity = BTreeMap::new();
        for (i, vm) in scenario.vms.iter().enumerate() {
            let pid = pid_of(i);
            let mut next = pid;
            let mut vcpu_n = 0;
            let mut emu_n = 0;
            // Emulator threads first so the process's main thread (tid == pid)
            // is an emulator thread, as with QEMU.
            for class in [ThreadClass::Emulator, ThreadClass::Vcpu] {
                for g in vm.groups.iter().filter(|g| g.class == class) {
                    for _ in 0..g.count {
                        let name = match class {
                            ThreadClass::Vcpu => {
                                vcpu_n += 1;
                                format!("CPU {}/KVM", vcpu_n - 1)
                            }
                            ThreadClass::Emulator => {
                                emu_n += 1;
                                if emu_n == 1 {
                                    "qemu-system-aar".to_string()
                                } else {
                                    format!("IO iothread{}", emu_n - 1)
                                }
                            }
                        };
                        threads.push(SimThread {
                            tid: next,
                            vm: i,
                            class,
                            name,
                            base_demand: g.demand,
                        });
                        affinity.insert(next, g.cores.clone());
                        next += 1;
                    }
                }
            }
        }
        let counters = threads.iter().map(|t| (t.tid, RawSchedstat::default())).collect();
        let stat = cores.iter().map(|c| (c.id, (0, 0))).collect();
        let rng = ChaCha8Rng::seed_from_u64(scenario.model.seed);
        Ok(Simulator {
            scenario,
            cores,
            threads,
            affinity,
            counters,
            stat,
            ticks: 0,
            rng,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn cores(&self) -> &[SimCore] {
        &self.cores
    }

    pub fn threads(&self) -> &[SimThread] {
        &self.threads
    }

    /// Simulated seconds elapsed.
    pub fn time(&self) -> f64 {
        self.ticks as f64 * self.scenario.model.dt
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn affinity(&self, tid: Tid) -> Option<&CoreSet> {
        self.affinity.get(&tid)
    }

    pub fn vm_index(&self, id: &VmId) -> Option<usize> {
        self.scenario.vms.iter().position(|v| &v.id == id)
    }

    pub fn pid(&self, vm: usize) -> Pid {
        pid_of(vm)
    }

    pub fn tids(&self, vm: usize, class: ThreadClass) -> Vec<Tid> {
        self.threads
            .iter()
            .filter(|t| t.vm == vm && t.class == class)
            .map(|t| t.tid)
            .collect()
    }

    /// Sets the affinity of every `class` thread of a VM.
    pub fn set_class_affinity(&mut self, vm: &VmId, class: ThreadClass, cores: &CoreSet) -> Result<(), SimError> {
        let i = self.vm_index(vm).ok_or_else(|| SimError::UnknownVm(vm.clone()))?;
        if cores.is_empty() {
            return Err(SimError::UnaffinedThread(format!("{vm} {}", class.as_str())));
        }
        for tid in self.tids(i, class) {
            self.affinity.insert(tid, cores.clone());
        }
        Ok(())
    }

    /// Demand of every thread for the tick starting now, jitter included.
    fn demands(&mut self) -> Vec<f64> {
        let loads = self.scenario.loads_at(self.time());
        let jitter = self.scenario.model.jitter;
        let vms = &self.scenario.vms;
        let mut out = Vec::with_capacity(self.threads.len());
        for t in &self.threads {
            let load = loads[&(vms[t.vm].id.clone(), t.class)];
            let noise = if jitter > 0.0 {
                1.0 + jitter * self.rng.gen_range(-1.0..=1.0)
            } else {
                1.0
            };
            out.push((t.base_demand * load * noise).clamp(0.0, 1.0));
        }
        out
    }

    /// Advances one tick under the current affinity table.
    pub fn step(&mut self) -> Result<StepOutput, SimError> {
        let dt = self.scenario.model.dt;
        let demands = self.demands();
        let pairs: Vec<(f64, &CoreSet)> = self
            .threads
            .iter()
            .zip(&demands)
            .map(|(t, d)| (*d, &self.affinity[&t.tid]))
            .collect();
        let alloc = allocate(&self.cores, &pairs, self.scenario.model.spread).map_err(|e| match e {
            SimError::UnaffinedThread(i) => {
                let idx: usize = i.trim_start_matches('#').parse().unwrap_or(0);
                SimError::UnaffinedThread(self.threads[idx].tid.to_string())
            }
            e => e,
        })?;
        let mut ticks = Vec::with_capacity(self.threads.len());
        for ((t, req), ach) in self.threads.iter().zip(&demands).zip(&alloc.achieved) {
            let delay = if *req > 0.0 { (req - ach).max(0.0) / req * dt } else { 0.0 };
            let c = self.counters.get_mut(&t.tid).expect("counter per thread");
            c.cpu_time_ns += (ach * dt * 1e9).round() as u64;
            c.run_delay_ns += (delay * 1e9).round() as u64;
            c.timeslices += (ach * dt * 250.0).round() as u64;
            ticks.push(ThreadTick {
                tid: t.tid,
                vm: t.vm,
                class: t.class,
                requested: *req,
                achieved: *ach,
                delay,
            });
        }
        let mut core_util = BTreeMap::new();
        for core in &self.cores {
            let u = (alloc.core_served[&core.id] / core.capacity).clamp(0.0, 1.0);
            let busy = (u * dt * STAT_UNITS_PER_SEC).round() as u64;
            let total = (dt * STAT_UNITS_PER_SEC).round() as u64;
            let e = self.stat.get_mut(&core.id).expect("stat per core");
            e.0 += busy;
            e.1 += total.saturating_sub(busy);
            core_util.insert(core.id, u);
        }
        self.ticks += 1;
        let snapshot = TelemetrySnapshot {
            timestamp_ns: self.now_ns(),
            per_thread: self.counters.clone(),
            per_core_util: core_util.clone(),
            gone: Vec::new(),
        };
        Ok(StepOutput {
            time: self.time(),
            threads: ticks,
            core_util,
            snapshot,
        })
    }

    /// Writes the current proc view as a directory tree readable by
    /// [`ProcFs`](crate::telemetry::ProcFs).
    pub fn dump_procfs(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("stat"), self.stat_text())?;
        for (i, vm) in self.scenario.vms.iter().enumerate() {
            let pdir = dir.join(pid_of(i).to_string());
            fs::create_dir_all(&pdir)?;
            fs::write(pdir.join("cmdline"), cmdline(vm).replace(' ', "\0") + "\0")?;
            for t in self.threads.iter().filter(|t| t.vm == i) {
                let tdir = pdir.join("task").join(t.tid.to_string());
                fs::create_dir_all(&tdir)?;
                fs::write(tdir.join("comm"), format!("{}\n", t.name))?;
                fs::write(tdir.join("schedstat"), format!("{}\n", self.counters[&t.tid]))?;
            }
        }
        Ok(())
    }

    fn stat_text(&self) -> String {
        let (busy, idle) = self.stat.values().fold((0, 0), |a, (b, i)| (a.0 + b, a.1 + i));
        let mut out = format!("cpu  {busy} 0 0 {idle} 0 0 0 0 0 0\n");
        for (id, (b, i)) in &self.stat {
            let _ = writeln!(out, "cpu{id} {b} 0 0 {i} 0 0 0 0 0 0");
        }
        out
    }
}

fn cmdline(vm: &VmSpec) -> String {
    format!("qemu-system-aarch64 -name guest={},debug-threads=on", vm.id)
}

impl TelemetrySource for Simulator {
    fn processes(&self) -> Result<Vec<Pid>, SourceError> {
        Ok((0..self.scenario.vms.len()).map(pid_of).collect())
    }

    fn cmdline(&self, pid: Pid) -> Result<String, SourceError> {
        let i = self.vm_of_pid(pid)?;
        Ok(cmdline(&self.scenario.vms[i]))
    }

    fn tasks(&self, pid: Pid) -> Result<Vec<Tid>, SourceError> {
        let i = self.vm_of_pid(pid)?;
        Ok(self.threads.iter().filter(|t| t.vm == i).map(|t| t.tid).collect())
    }

    fn comm(&self, pid: Pid, tid: Tid) -> Result<String, SourceError> {
        self.thread(pid, tid).map(|t| t.name.clone())
    }

    fn schedstat(&self, pid: Pid, tid: Tid) -> Result<String, SourceError> {
        self.thread(pid, tid).map(|t| format!("{}\n", self.counters[&t.tid]))
    }

    fn stat(&self) -> Result<String, SourceError> {
        Ok(self.stat_text())
    }

    fn now_ns(&self) -> u64 {
        (self.time() * 1e9).round() as u64
    }
}

impl Simulator {
    fn vm_of_pid(&self, pid: Pid) -> Result<usize, SourceError> {
        (0..self.scenario.vms.len())
            .find(|i| pid_of(*i) == pid)
            .ok_or_else(|| SourceError::Gone(format!("pid {pid}")))
    }

    fn thread(&self, pid: Pid, tid: Tid) -> Result<&SimThread, SourceError> {
        let i = self.vm_of_pid(pid)?;
        self.threads
            .iter()
            .find(|t| t.tid == tid && t.vm == i)
            .ok_or_else(|| SourceError::Gone(format!("tid {tid}")))
    }
}

impl ActuatorBackend for Simulator {
    fn apply(&mut self, req: &BindingRequest) -> Result<ApplyReport, ActuatorError> {
        let vm = self
            .vm_index(&req.vm_id)
            .ok_or_else(|| ActuatorError::UnknownVm(req.vm_id.clone()))?;
        let known = self.tids(vm, ThreadClass::Emulator);
        let all: CoreSet = self.cores.iter().map(|c| c.id).collect();
        if !req.cores.is_subset(&all) {
            return Err(ActuatorError::InvalidRequest(format!("{}: cores outside the host", req.vm_id)));
        }
        let mut report = ApplyReport::default();
        for tid in &req.tids {
            if !known.contains(tid) {
                report.vanished.push(*tid);
                continue;
            }
            if self.affinity.get(tid) != Some(&req.cores) {
                self.affinity.insert(*tid, req.cores.clone());
                report.changed = true;
            }
        }
        Ok(report)
    }

    fn verify(&self, vm_id: &VmId) -> Result<CoreSet, ActuatorError> {
        let vm = self.vm_index(vm_id).ok_or_else(|| ActuatorError::UnknownVm(vm_id.clone()))?;
        let sets: Vec<&CoreSet> = self
            .tids(vm, ThreadClass::Emulator)
            .iter()
            .map(|t| &self.affinity[t])
            .collect();
        match sets.split_first() {
            Some((first, rest)) if rest.iter().all(|s| s == first) => Ok((*first).clone()),
            _ => Ok(CoreSet::new()),
        }
    }
}
