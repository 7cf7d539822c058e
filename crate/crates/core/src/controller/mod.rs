//! The scheduling state machine.
//!
//! * `INITIAL` binds every VM's emulator threads to all small cores.
//! * `DOWNSCALING` takes one VM at a time (highest emulator utilization first)
//!   and bisects its emulator core count down to the knee of the run-delay
//!   curve. Each probe holds its binding for `measure_window` ticks.
//! * `STABLE` emits nothing and watches the emulator delay of every VM, vCPU
//!   utilization and the system utilization disparity for relative jumps.
//! * `OSCILLATION` counts consecutive anomalous ticks per metric. Reaching
//!   `oscillation_limit` rebinds the implicated VMs to all small cores and
//!   downscales only those; a clean tick returns to `STABLE`.

mod log;
mod search;
mod select;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ::log::{debug, info, warn};
use thiserror::Error;

pub use self::log::{DecisionLog, DecisionRecord, DECISION_LOG_HEADER};
pub use search::{
    plan_binary_search, significant_increase, BinarySearch, ProbeResult, SearchOutcome,
    SlopeThreshold, MIN_L1,
};
pub use select::{choose_cores, select_next_vm};

use crate::metrics::{stability_check, StabilityThresholds, SystemMetrics, VmMetrics};
use crate::telemetry::RingBuffer;
use crate::{CoreId, CoreSet, ThreadClass, VmId};

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("significance test needs n1 < n (n = {n}, n1 = {n1})")]
    DegenerateDenominator { n: usize, n1: usize },
    #[error("no VM to select")]
    EmptySet,
    #[error("core count {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("no small cores configured")]
    NoSmallCores,
    #[error("probe for {0} cores was not requested")]
    UnexpectedProbe(usize),
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Fixed significance slope; `None` selects the adaptive rule.
    pub l1: Option<f64>,
    /// Scale of the adaptive rule `l1 = scale * v2 / (n - 1)`.
    pub l1_scale: f64,
    /// Ticks each probe binding is held; the first tick is discarded when
    /// the window is longer than one.
    pub measure_window: usize,
    pub thresholds: StabilityThresholds,
    pub oscillation_limit: usize,
    /// Seconds between ticks.
    pub tick_period: f64,
    /// Samples per metric in the stable-state baseline.
    pub stable_window: usize,
    /// Samples collected before anomaly checks start.
    pub stable_warmup: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            l1: None,
            l1_scale: 0.15,
            measure_window: 3,
            thresholds: StabilityThresholds::default(),
            oscillation_limit: 3,
            tick_period: 1.0,
            stable_window: 10,
            stable_warmup: 3,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidConfig(m));
        if let Some(l1) = self.l1 {
            if !(l1 > 1.0) {
                return bad(format!("l1 must exceed 1, got {l1}"));
            }
        }
        if !(self.l1_scale > 0.0) {
            return bad(format!("l1_scale must be positive, got {}", self.l1_scale));
        }
        if self.measure_window == 0 {
            return bad("measure_window must be at least 1".into());
        }
        if self.oscillation_limit == 0 {
            return bad("oscillation_limit must be at least 1".into());
        }
        if !(self.tick_period >= 0.0) {
            return bad(format!("tick_period must be non-negative, got {}", self.tick_period));
        }
        if self.stable_window == 0 || self.stable_warmup == 0 || self.stable_warmup > self.stable_window {
            return bad("need 1 <= stable_warmup <= stable_window".into());
        }
        let t = &self.thresholds;
        if !(t.delay_threshold > 0.0 && t.util_threshold > 0.0 && t.delay_floor > 0.0 && t.util_floor > 0.0) {
            return bad("stability thresholds and floors must be positive".into());
        }
        Ok(())
    }

    fn slope_threshold(&self) -> SlopeThreshold {
        match self.l1 {
            Some(l1) => SlopeThreshold::Fixed(l1),
            None => SlopeThreshold::Adaptive {
                scale: self.l1_scale,
            },
        }
    }
}

/// A binding decision for one VM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Bind {
        vm: VmId,
        class: ThreadClass,
        cores: CoreSet,
    },
    NoOp,
}

impl Action {
    fn bind(vm: VmId, cores: CoreSet) -> Self {
        Action::Bind {
            vm,
            class: ThreadClass::Emulator,
            cores,
        }
    }
}

/// Everything the controller sees on one tick.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickInput {
    pub vms: BTreeMap<VmId, VmMetrics>,
    pub system: SystemMetrics,
    pub core_util: BTreeMap<CoreId, f64>,
}

/// A monitored stable-state metric.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKey {
    EmuDelay(VmId),
    VcpuUtil(VmId),
    Disparity,
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKey::EmuDelay(vm) => write!(f, "emu_delay[{vm}]"),
            MetricKey::VcpuUtil(vm) => write!(f, "vcpu_util[{vm}]"),
            MetricKey::Disparity => f.write_str("disparity"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateName {
    Initial,
    Downscaling,
    Stable,
    Oscillation,
}

impl StateName {
    pub fn as_str(self) -> &'static str {
        match self {
            StateName::Initial => "INITIAL",
            StateName::Downscaling => "DOWNSCALING",
            StateName::Stable => "STABLE",
            StateName::Oscillation => "OSCILLATION",
        }
    }
}

impl fmt::Display for StateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A probe binding being measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub k: usize,
    pub cores: CoreSet,
    ticks: usize,
    samples: Vec<f64>,
}

impl Probe {
    fn new(k: usize, cores: CoreSet) -> Self {
        Probe {
            k,
            cores,
            ticks: 0,
            samples: Vec::new(),
        }
    }

    /// Adds one tick of observation; returns the settled mean once the
    /// window is complete.
    fn observe(&mut self, delay: f64, window: usize) -> Option<f64> {
        self.ticks += 1;
        if window == 1 || self.ticks > 1 {
            self.samples.push(delay);
        }
        if self.ticks >= window {
            Some(self.samples.iter().sum::<f64>() / self.samples.len() as f64)
        } else {
            None
        }
    }
}

/// The knee search in progress for one VM.
#[derive(Debug, Clone, PartialEq)]
pub struct VmSearch {
    pub vm: VmId,
    pub search: BinarySearch,
    pub probe: Probe,
    measured: BTreeMap<usize, CoreSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Downscaling {
    /// VMs still to be downscaled.
    pub pending: BTreeSet<VmId>,
    pub current: Option<VmSearch>,
}

/// Baseline windows of the monitored metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    windows: BTreeMap<MetricKey, RingBuffer<f64>>,
    settle: usize,
}

impl Baseline {
    fn fresh() -> Self {
        Baseline {
            windows: BTreeMap::new(),
            settle: 1,
        }
    }

    pub fn window(&self, key: &MetricKey) -> Option<Vec<f64>> {
        self.windows.get(key).map(|r| r.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Oscillation {
    pub baseline: Baseline,
    pub counters: BTreeMap<MetricKey, usize>,
    pub implicated: BTreeSet<VmId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FsmState {
    Initial,
    Downscaling(Downscaling),
    Stable(Baseline),
    Oscillation(Oscillation),
}

impl FsmState {
    pub fn name(&self) -> StateName {
        match self {
            FsmState::Initial => StateName::Initial,
            FsmState::Downscaling(_) => StateName::Downscaling,
            FsmState::Stable(_) => StateName::Stable,
            FsmState::Oscillation(_) => StateName::Oscillation,
        }
    }
}

/// The emulator scheduling controller. Feed it one [`TickInput`] per sampling
/// period and apply the returned actions before the next tick.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    small: CoreSet,
    state: FsmState,
    bindings: BTreeMap<VmId, CoreSet>,
}

impl Controller {
    pub fn new(config: ControllerConfig, small_cores: CoreSet) -> Result<Self, ControllerError> {
        config.validate()?;
        if small_cores.is_empty() {
            return Err(ControllerError::NoSmallCores);
        }
        Ok(Controller {
            config,
            small: small_cores,
            state: FsmState::Initial,
            bindings: BTreeMap::new(),
        })
    }

    /// Starts directly in `STABLE`, assuming `vms` are already bound to all
    /// small cores. Used when replaying a trace recorded after convergence.
    pub fn start_stable(&mut self, vms: impl IntoIterator<Item = VmId>) {
        for vm in vms {
            self.bindings.insert(vm, self.small.clone());
        }
        self.state = FsmState::Stable(Baseline::fresh());
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &FsmState {
        &self.state
    }

    pub fn state_name(&self) -> StateName {
        self.state.name()
    }

    pub fn small_cores(&self) -> &CoreSet {
        &self.small
    }

    /// Emulator core set last issued per VM.
    pub fn bindings(&self) -> &BTreeMap<VmId, CoreSet> {
        &self.bindings
    }

    /// Advances the state machine by one sampling period.
    pub fn tick(&mut self, input: &TickInput) -> Vec<Action> {
        if let Some(bad) = input.vms.iter().find(|(_, m)| !m.is_well_formed()) {
            warn!("dropping tick: malformed metrics for {}: {:?}", bad.0, bad.1);
            return Vec::new();
        }
        if !(input.system.disparity.is_finite() && input.system.disparity >= 0.0) {
            warn!("dropping tick: malformed system metrics {:?}", input.system);
            return Vec::new();
        }
        let state = std::mem::replace(&mut self.state, FsmState::Initial);
        let (next, actions) = match state {
            FsmState::Initial => self.on_initial(input),
            FsmState::Downscaling(d) => self.on_downscaling(d, input),
            FsmState::Stable(b) => self.on_stable(b, input),
            FsmState::Oscillation(o) => self.on_oscillation(o, input),
        };
        self.state = next;
        for a in &actions {
            if let Action::Bind { vm, cores, .. } = a {
                self.bindings.insert(vm.clone(), cores.clone());
            }
        }
        actions
    }

    fn on_initial(&mut self, input: &TickInput) -> (FsmState, Vec<Action>) {
        if input.vms.is_empty() {
            return (FsmState::Initial, Vec::new());
        }
        let actions: Vec<Action> = input
            .vms
            .keys()
            .map(|vm| Action::bind(vm.clone(), self.small.clone()))
            .collect();
        info!("binding {} VMs to all small cores", actions.len());
        let pending = input.vms.keys().cloned().collect();
        (
            FsmState::Downscaling(Downscaling {
                pending,
                current: None,
            }),
            actions,
        )
    }

    fn on_downscaling(&mut self, mut d: Downscaling, input: &TickInput) -> (FsmState, Vec<Action>) {
        let mut actions = Vec::new();
        let n = self.small.len();
        let window = self.config.measure_window;

        let Some(mut cur) = d.current.take() else {
            d.pending.retain(|vm| input.vms.contains_key(vm));
            if d.pending.is_empty() {
                info!("downscaling complete");
                return (FsmState::Stable(Baseline::fresh()), actions);
            }
            let candidates = d
                .pending
                .iter()
                .filter_map(|vm| input.vms.get(vm).map(|m| (vm, m.emu_cpu_util)));
            let Ok(vm) = select_next_vm(candidates) else {
                return (FsmState::Downscaling(d), actions);
            };
            let search = BinarySearch::new(n, self.config.slope_threshold()).expect("n > 0");
            let all = self.small.clone();
            if self.bindings.get(&vm) != Some(&all) {
                actions.push(Action::bind(vm.clone(), all.clone()));
            }
            debug!("downscaling {vm}");
            d.current = Some(VmSearch {
                vm,
                search,
                probe: Probe::new(n, all),
                measured: BTreeMap::new(),
            });
            return (FsmState::Downscaling(d), actions);
        };

        let Some(m) = input.vms.get(&cur.vm) else {
            d.current = Some(cur);
            return (FsmState::Downscaling(d), actions);
        };
        let Some(value) = cur.probe.observe(m.emu_run_delay_rate, window) else {
            d.current = Some(cur);
            return (FsmState::Downscaling(d), actions);
        };
        let k = cur.probe.k;
        cur.measured.insert(k, cur.probe.cores.clone());
        cur.search
            .record(k, value)
            .expect("probe follows the search order");
        debug!("{}: k={k} delay={value:.0}", cur.vm);

        match cur.search.next_k() {
            Some(next) => {
                let cores = choose_cores(next, &self.small, &input.core_util).expect("1 <= k <= n");
                if self.bindings.get(&cur.vm) != Some(&cores) {
                    actions.push(Action::bind(cur.vm.clone(), cores.clone()));
                }
                cur.probe = Probe::new(next, cores);
                d.current = Some(cur);
            }
            None => {
                let k = cur.search.result().expect("converged");
                let cores = match cur.measured.get(&k) {
                    Some(c) => c.clone(),
                    None => choose_cores(k, &self.small, &input.core_util).expect("1 <= k <= n"),
                };
                info!("{}: settled on {k} of {n} small cores", cur.vm);
                if self.bindings.get(&cur.vm) != Some(&cores) {
                    actions.push(Action::bind(cur.vm.clone(), cores));
                }
                d.pending.remove(&cur.vm);
                if d.pending.is_empty() {
                    info!("downscaling complete");
                    return (FsmState::Stable(Baseline::fresh()), actions);
                }
            }
        }
        (FsmState::Downscaling(d), actions)
    }

    fn observations(&self, input: &TickInput) -> Vec<(MetricKey, f64, f64, f64)> {
        let t = &self.config.thresholds;
        let mut out = Vec::new();
        for (vm, m) in &input.vms {
            out.push((
                MetricKey::EmuDelay(vm.clone()),
                m.emu_run_delay_rate,
                t.delay_threshold,
                t.delay_floor,
            ));
            out.push((
                MetricKey::VcpuUtil(vm.clone()),
                m.vcpu_cpu_util,
                t.util_threshold,
                t.util_floor,
            ));
        }
        out.push((
            MetricKey::Disparity,
            input.system.disparity,
            t.util_threshold,
            t.util_floor,
        ));
        out
    }

    /// Checks every metric against its baseline. Normal values are folded
    /// into the baseline; anomalous keys are returned.
    fn evaluate(&self, baseline: &mut Baseline, input: &TickInput) -> Vec<MetricKey> {
        let mut anomalous = Vec::new();
        let cap = self.config.stable_window;
        for (key, value, threshold, floor) in self.observations(input) {
            let ring = baseline
                .windows
                .entry(key.clone())
                .or_insert_with(|| RingBuffer::new(cap));
            if ring.len() < self.config.stable_warmup {
                ring.push(value);
                continue;
            }
            let window: Vec<f64> = ring.iter().copied().collect();
            let verdict = stability_check(&window, value, threshold, floor).expect("non-empty window");
            if verdict.is_anomalous() {
                debug!("{key} anomalous: {value} (magnitude {:.3})", verdict.magnitude);
                anomalous.push(key);
            } else {
                ring.push(value);
            }
        }
        anomalous
    }

    /// VMs that appeared after the initial pass.
    fn newcomers(&self, input: &TickInput) -> BTreeSet<VmId> {
        input
            .vms
            .keys()
            .filter(|vm| !self.bindings.contains_key(*vm))
            .cloned()
            .collect()
    }

    fn adopt(&self, vms: BTreeSet<VmId>) -> (FsmState, Vec<Action>) {
        info!("new VMs {:?}, binding to all small cores", vms);
        let actions = vms
            .iter()
            .map(|vm| Action::bind(vm.clone(), self.small.clone()))
            .collect();
        (
            FsmState::Downscaling(Downscaling {
                pending: vms,
                current: None,
            }),
            actions,
        )
    }

    fn on_stable(&mut self, mut baseline: Baseline, input: &TickInput) -> (FsmState, Vec<Action>) {
        let fresh = self.newcomers(input);
        if !fresh.is_empty() {
            return self.adopt(fresh);
        }
        if baseline.settle > 0 {
            baseline.settle -= 1;
            return (FsmState::Stable(baseline), Vec::new());
        }
        let anomalous = self.evaluate(&mut baseline, input);
        if anomalous.is_empty() {
            return (FsmState::Stable(baseline), Vec::new());
        }
        info!("anomaly in {} metric(s), entering oscillation", anomalous.len());
        let osc = Oscillation {
            baseline,
            counters: anomalous.into_iter().map(|k| (k, 1)).collect(),
            implicated: BTreeSet::new(),
        };
        self.escalate(osc, input)
    }

    fn on_oscillation(&mut self, mut osc: Oscillation, input: &TickInput) -> (FsmState, Vec<Action>) {
        let anomalous = self.evaluate(&mut osc.baseline, input);
        if anomalous.is_empty() {
            info!("metrics back to normal");
            return (FsmState::Stable(osc.baseline), Vec::new());
        }
        let prev = std::mem::take(&mut osc.counters);
        osc.counters = anomalous
            .into_iter()
            .map(|k| {
                let c = prev.get(&k).copied().unwrap_or(0) + 1;
                (k, c)
            })
            .collect();
        self.escalate(osc, input)
    }

    /// Rebinds and downscales the implicated VMs once a counter hits the
    /// limit; otherwise stays in oscillation.
    fn escalate(&mut self, mut osc: Oscillation, input: &TickInput) -> (FsmState, Vec<Action>) {
        let mut implicated = BTreeSet::new();
        for key in osc.counters.keys() {
            match key {
                MetricKey::EmuDelay(vm) | MetricKey::VcpuUtil(vm) => {
                    implicated.insert(vm.clone());
                }
                MetricKey::Disparity => implicated.extend(input.vms.keys().cloned()),
            }
        }
        osc.implicated = implicated;
        let limit = self.config.oscillation_limit;
        if osc.counters.values().all(|c| *c < limit) {
            return (FsmState::Oscillation(osc), Vec::new());
        }
        info!("rebinding {:?} to all small cores", osc.implicated);
        let actions = osc
            .implicated
            .iter()
            .map(|vm| Action::bind(vm.clone(), self.small.clone()))
            .collect();
        (
            FsmState::Downscaling(Downscaling {
                pending: osc.implicated,
                current: None,
            }),
            actions,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(delay: f64, emu_util: f64) -> VmMetrics {
        VmMetrics {
            emulator_ratio: 0.3,
            emu_run_delay_rate: delay,
            vcpu_run_delay_rate: 1.0e6,
            emu_cpu_util: emu_util,
            vcpu_cpu_util: 0.6,
        }
    }

    fn input(vms: &[(&str, f64, f64)]) -> TickInput {
        TickInput {
            vms: vms
                .iter()
                .map(|(id, d, u)| (VmId::from(*id), metrics(*d, *u)))
                .collect(),
            system: SystemMetrics {
                disparity: 0.1,
                mean_util: 0.5,
            },
            core_util: BTreeMap::new(),
        }
    }

    fn small4() -> CoreSet {
        (0..4).collect()
    }

    #[test]
    fn initial_binds_all_small_cores() {
        let mut c = Controller::new(ControllerConfig::default(), small4()).unwrap();
        let acts = c.tick(&input(&[("vm1", 1e6, 0.3), ("vm2", 1e6, 0.2)]));
        assert_eq!(
            acts,
            vec![
                Action::bind("vm1".into(), small4()),
                Action::bind("vm2".into(), small4()),
            ]
        );
        assert_eq!(c.state_name(), StateName::Downscaling);
    }

    #[test]
    fn stable_is_quiet() {
        let mut c = Controller::new(ControllerConfig::default(), small4()).unwrap();
        c.start_stable(["vm1".into(), "vm2".into()]);
        let tick = input(&[("vm1", 1e6, 0.3), ("vm2", 2e6, 0.2)]);
        for _ in 0..50 {
            assert!(c.tick(&tick).is_empty());
            assert_eq!(c.state_name(), StateName::Stable);
        }
    }

    #[test]
    fn persistent_anomaly_rebinds_implicated_vm_only() {
        let mut c = Controller::new(ControllerConfig::default(), small4()).unwrap();
        c.start_stable(["vm1".into(), "vm2".into()]);
        let calm = input(&[("vm1", 1e6, 0.3), ("vm2", 2e6, 0.2)]);
        for _ in 0..10 {
            assert!(c.tick(&calm).is_empty());
        }
        let hot = input(&[("vm1", 1e6, 0.3), ("vm2", 9e6, 0.2)]);
        assert!(c.tick(&hot).is_empty());
        assert_eq!(c.state_name(), StateName::Oscillation);
        assert!(c.tick(&hot).is_empty());
        let acts = c.tick(&hot);
        assert_eq!(acts, vec![Action::bind("vm2".into(), small4())]);
        match c.state() {
            FsmState::Downscaling(d) => {
                assert_eq!(d.pending, BTreeSet::from([VmId::from("vm2")]));
            }
            s => panic!("unexpected state {s:?}"),
        }
    }

    #[test]
    fn short_anomaly_returns_to_stable() {
        let mut c = Controller::new(ControllerConfig::default(), small4()).unwrap();
        c.start_stable(["vm1".into()]);
        let calm = input(&[("vm1", 1e6, 0.3)]);
        for _ in 0..10 {
            c.tick(&calm);
        }
        let hot = input(&[("vm1", 5e6, 0.3)]);
        assert!(c.tick(&hot).is_empty());
        assert!(c.tick(&hot).is_empty());
        assert!(c.tick(&calm).is_empty());
        assert_eq!(c.state_name(), StateName::Stable);
    }

    #[test]
    fn malformed_metrics_dropped() {
        let mut c = Controller::new(ControllerConfig::default(), small4()).unwrap();
        let mut bad = input(&[("vm1", f64::NAN, 0.3)]);
        assert!(c.tick(&bad).is_empty());
        assert_eq!(c.state_name(), StateName::Initial);
        bad.vms.get_mut(&VmId::from("vm1")).unwrap().emu_run_delay_rate = 1.0;
        bad.system.disparity = f64::NAN;
        assert!(c.tick(&bad).is_empty());
        assert_eq!(c.state_name(), StateName::Initial);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ControllerConfig::default();
        cfg.l1 = Some(1.0);
        assert!(cfg.validate().is_err());
        cfg.l1 = Some(50.0);
        assert!(cfg.validate().is_ok());
        cfg.measure_window = 0;
        assert!(cfg.validate().is_err());
        let cfg = ControllerConfig {
            oscillation_limit: 0,
            ..ControllerConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(Controller::new(ControllerConfig::default(), CoreSet::new()).is_err());
    }
}
