//! Closed-loop runs and steady-state curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{SimError, Simulator, StepOutput};
use crate::controller::{choose_cores, Controller, ControllerConfig, DecisionRecord, StateName};
use crate::cpulist::format_cpulist;
use crate::pipeline::ControlLoop;
use crate::report::{p95, TRIM_SECONDS};
use crate::telemetry::{Collector, DiscoveryConfig};
use crate::{ThreadClass, VmId};

pub const TRACE_HEADER: &str = "tick,time_s,vm_id,state,emu_cores,emulator_ratio,emu_delay_rate,vcpu_delay_rate,emu_util,vcpu_util,disparity,latency_proxy";

/// Ground truth for one VM at the end of one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub tick: u64,
    pub time: f64,
    pub vm_id: VmId,
    /// Controller state after the tick; `NONE` without a controller.
    pub state: String,
    pub emu_cores: String,
    pub emulator_ratio: f64,
    pub emu_delay_rate: f64,
    pub vcpu_delay_rate: f64,
    /// Emulator CPU use in core-equivalents.
    pub emu_util: f64,
    /// Mean CPU use per vCPU thread.
    pub vcpu_util: f64,
    pub disparity: f64,
    pub latency_proxy: f64,
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        let cores = if self.emu_cores.contains(',') {
            format!("\"{}\"", self.emu_cores)
        } else {
            self.emu_cores.clone()
        };
        format!(
            "{},{},{},{},{},{:.6},{:.1},{:.1},{:.6},{:.6},{:.6},{:.1}",
            self.tick,
            self.time,
            self.vm_id,
            self.state,
            cores,
            self.emulator_ratio,
            self.emu_delay_rate,
            self.vcpu_delay_rate,
            self.emu_util,
            self.vcpu_util,
            self.disparity,
            self.latency_proxy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub decisions: Vec<DecisionRecord>,
    /// Simulated time at which the controller first reached `STABLE`.
    pub converged_at: Option<f64>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn decisions_csv(&self) -> String {
        let mut out = String::from(crate::controller::DECISION_LOG_HEADER);
        out.push('\n');
        for d in &self.decisions {
            let _ = writeln!(out, "{}", d.to_csv());
        }
        out
    }

    pub fn vm_ids(&self) -> Vec<VmId> {
        let mut ids: Vec<VmId> = self.rows.iter().map(|r| r.vm_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// `(time, latency proxy)` of one VM.
    pub fn latency_series(&self, vm: &VmId) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| &r.vm_id == vm)
            .map(|r| (r.time, r.latency_proxy))
            .collect()
    }

    pub fn bind_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.action == "BIND").count()
    }
}

fn rows_for(sim: &Simulator, out: &StepOutput, state: &str, tick: u64) -> Vec<TraceRow> {
    let m = &sim.scenario().model;
    let dt = m.dt;
    let disparity = crate::metrics::utilization_disparity(&out.core_util).unwrap_or(0.0);
    let mut rows = Vec::new();
    for (i, vm) in sim.scenario().vms.iter().enumerate() {
        let sum = |class: ThreadClass, f: &dyn Fn(&super::ThreadTick) -> f64| -> f64 {
            out.threads.iter().filter(|t| t.vm == i && t.class == class).map(f).sum()
        };
        let emu = sum(ThreadClass::Emulator, &|t| t.achieved);
        let vcpu = sum(ThreadClass::Vcpu, &|t| t.achieved);
        let vcpus = out.threads.iter().filter(|t| t.vm == i && t.class == ThreadClass::Vcpu).count();
        let emu_delay = out.delay_rate(i, ThreadClass::Emulator, dt);
        let vcpu_delay = out.delay_rate(i, ThreadClass::Vcpu, dt);
        let emu_tids = sim.tids(i, ThreadClass::Emulator);
        let emu_cores = emu_tids
            .first()
            .and_then(|t| sim.affinity(*t))
            .and_then(|c| format_cpulist(c).ok())
            .unwrap_or_default();
        rows.push(TraceRow {
            tick,
            time: out.time,
            vm_id: vm.id.clone(),
            state: state.to_string(),
            emu_cores,
            emulator_ratio: if emu + vcpu > 0.0 { emu / (emu + vcpu) } else { 0.0 },
            emu_delay_rate: emu_delay,
            vcpu_delay_rate: vcpu_delay,
            emu_util: emu,
            vcpu_util: if vcpus > 0 { vcpu / vcpus as f64 } else { 0.0 },
            disparity,
            latency_proxy: m.base_ns + m.alpha * vcpu_delay + m.beta * emu_delay,
        });
    }
    rows
}

/// Runs a scenario for its full duration. With `controller` set, the
/// emulator bindings are driven by the control loop over the simulator's proc
/// view; otherwise the scenario's affinities stay fixed.
pub fn run(scenario: &crate::simkvm::Scenario, controller: Option<&ControllerConfig>) -> Result<Trace, SimError> {
    let mut sim = Simulator::new(scenario.clone())?;
    let mut trace = Trace::default();
    let ticks = scenario.model.ticks();
    let Some(cfg) = controller else {
        for tick in 1..=ticks as u64 {
            let out = sim.step()?;
            trace.rows.extend(rows_for(&sim, &out, "NONE", tick));
        }
        return Ok(trace);
    };
    let collector = Collector::discover(&sim, DiscoveryConfig::default())
        .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let ctl = Controller::new(cfg.clone(), scenario.cores.small_cores())
        .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let mut lp = ControlLoop::new(collector, ctl);
    // Baseline counters at t = 0.
    lp.step(&sim).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    for tick in 1..=ticks as u64 {
        let out = sim.step()?;
        let (_, rec) = lp.step(&sim).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        for (vm, r) in lp.apply(&mut sim, &rec.actions) {
            if let Err(e) = r {
                return Err(SimError::InvalidScenario(format!("{vm}: {e}")));
            }
        }
        let t = out.time;
        for a in &rec.actions {
            trace.decisions.push(DecisionRecord::from_action(t, rec.state, a));
        }
        let after = lp.controller().state_name();
        if after == StateName::Stable && trace.converged_at.is_none() {
            trace.converged_at = Some(t);
        }
        trace.rows.extend(rows_for(&sim, &out, after.as_str(), tick));
    }
    let end = sim.time();
    trace
        .decisions
        .push(DecisionRecord::no_op(end, lp.controller().state_name()));
    Ok(trace)
}

pub fn run_controller(scenario: &crate::simkvm::Scenario, cfg: &ControllerConfig) -> Result<Trace, SimError> {
    run(scenario, Some(cfg))
}

/// Emulators bound to the same cores as their VM's vCPUs, no controller.
pub fn run_baseline(scenario: &crate::simkvm::Scenario) -> Result<Trace, SimError> {
    run(&scenario.with_baseline_affinity(), None)
}

/// Per-VM comparison of a controller run against the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub vm_id: VmId,
    pub controller_p95: f64,
    pub baseline_p95: f64,
    /// Samples compared per run.
    pub samples: usize,
    pub converged_at: Option<f64>,
}

impl RunSummary {
    pub const HEADER: &'static str = "vm_id,controller_p95,baseline_p95,samples,converged_at";

    /// P95 of the latency proxy over the window that starts ten seconds in
    /// (or at convergence, if later) and ends ten seconds before the end.
    pub fn compare(controller: &Trace, baseline: &Trace) -> Vec<RunSummary> {
        controller
            .vm_ids()
            .into_iter()
            .map(|vm| {
                let c = controller.latency_series(&vm);
                let b = baseline.latency_series(&vm);
                let first = c.first().map_or(0.0, |s| s.0);
                let last = c.last().map_or(0.0, |s| s.0);
                let lo = (first + TRIM_SECONDS).max(controller.converged_at.unwrap_or(f64::INFINITY).min(last));
                let hi = last - TRIM_SECONDS;
                let window = |s: &[(f64, f64)]| -> Vec<f64> {
                    s.iter().filter(|(t, _)| *t >= lo && *t <= hi).map(|(_, v)| *v).collect()
                };
                let cw = window(&c);
                let bw = window(&b);
                RunSummary {
                    vm_id: vm,
                    controller_p95: p95(&cw).unwrap_or(f64::NAN),
                    baseline_p95: p95(&bw).unwrap_or(f64::NAN),
                    samples: cw.len(),
                    converged_at: controller.converged_at,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.1},{:.1},{},{}",
            self.vm_id,
            self.controller_p95,
            self.baseline_p95,
            self.samples,
            self.converged_at.map_or(String::new(), |t| t.to_string())
        )
    }
}

/// Steady-state emulator run-delay rate of `vm` with its emulators bound to
/// the `k` least-loaded small cores, for each `k`. Other VMs keep the
/// scenario's affinities; jitter is switched off.
pub fn emulator_delay_curve(
    scenario: &crate::simkvm::Scenario,
    vm: &VmId,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, SimError> {
    let mut sc = scenario.clone();
    sc.model.jitter = 0.0;
    let small = sc.cores.small_cores();
    let probe = Simulator::new(sc.clone())?;
    let idx = probe.vm_index(vm).ok_or_else(|| SimError::UnknownVm(vm.clone()))?;
    let mut warm = probe.clone();
    warm.set_class_affinity(vm, ThreadClass::Emulator, &small)?;
    let util = warm.step()?.core_util;
    let mut out = BTreeMap::new();
    for &k in ks {
        let cores = choose_cores(k, &small, &util).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let mut sim = probe.clone();
        sim.set_class_affinity(vm, ThreadClass::Emulator, &cores)?;
        let mut last = 0.0;
        for _ in 0..3 {
            let step = sim.step()?;
            last = step.delay_rate(idx, ThreadClass::Emulator, sc.model.dt);
        }
        out.insert(k, last);
    }
    Ok(out)
}
