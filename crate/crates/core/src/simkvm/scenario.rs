//! Scenario files.
//!
//! ```text
//! version = 1
//!
//! [model]
//! duration = 120        # seconds
//! dt = 1                # seconds per tick
//! alpha = 1             # latency proxy weight of vCPU delay
//! beta = 1              # latency proxy weight of emulator delay
//! base_ns = 1000000
//! spread = equal        # or greedy
//! seed = 1
//! jitter = 0.05         # relative per-tick demand noise
//!
//! [cores]
//! small = 4
//! big = 4
//! small_capacity = 1.0
//! big_capacity = 2.0
//!
//! [vm web]
//! vcpu = 4 cores=4-7 demand=0.95
//! emulator = 2 cores=0-7 demand=0.5
//!
//! [phase 60]
//! web.load = 0.5
//! web.emulator.load = 1.5
//! ```
//!
//! Small cores are numbered from 0, big cores follow. `vcpu` and `emulator`
//! lines add `count` threads with the given affinity and base demand and may
//! repeat. A phase line sets a load multiplier from its start time on; a
//! thread's demand is its base demand times the multiplier, clipped to 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SimError;
use crate::config::{ConfigError, Document, Section};
use crate::cpulist::{format_cpulist, parse_cpulist};
use crate::{CoreSet, ThreadClass, VmId};

pub const SCENARIO_VERSION: u32 = 1;

/// How a thread's demand is laid over its allowed cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spread {
    /// Evenly over every allowed core.
    Equal,
    /// All of it on the allowed core with the lowest relative load so far,
    /// threads placed in tid order.
    Greedy,
}

impl Spread {
    pub fn as_str(self) -> &'static str {
        match self {
            Spread::Equal => "equal",
            Spread::Greedy => "greedy",
        }
    }
}

impl std::str::FromStr for Spread {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "equal" => Ok(Spread::Equal),
            "greedy" => Ok(Spread::Greedy),
            _ => Err(format!("unknown spread {s:?} (equal or greedy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub duration: f64,
    pub dt: f64,
    pub alpha: f64,
    pub beta: f64,
    pub base_ns: f64,
    pub spread: Spread,
    pub seed: u64,
    pub jitter: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            duration: 120.0,
            dt: 1.0,
            alpha: 1.0,
            beta: 1.0,
            base_ns: 1.0e6,
            spread: Spread::Equal,
            seed: 0,
            jitter: 0.0,
        }
    }
}

impl ModelParams {
    pub fn ticks(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreSpec {
    pub small: usize,
    pub big: usize,
    pub small_capacity: f64,
    pub big_capacity: f64,
}

impl Default for CoreSpec {
    fn default() -> Self {
        CoreSpec {
            small: 4,
            big: 4,
            small_capacity: 1.0,
            big_capacity: 2.0,
        }
    }
}

impl CoreSpec {
    pub fn small_cores(&self) -> CoreSet {
        (0..self.small as u32).collect()
    }

    pub fn big_cores(&self) -> CoreSet {
        (self.small as u32..(self.small + self.big) as u32).collect()
    }

    pub fn all_cores(&self) -> CoreSet {
        (0..(self.small + self.big) as u32).collect()
    }
}

/// `count` identical threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreadGroup {
    pub class: ThreadClass,
    pub count: usize,
    pub cores: CoreSet,
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmSpec {
    pub id: VmId,
    pub groups: Vec<ThreadGroup>,
}

impl VmSpec {
    /// Union of the vCPU affinities.
    pub fn vcpu_cores(&self) -> CoreSet {
        self.groups
            .iter()
            .filter(|g| g.class == ThreadClass::Vcpu)
            .flat_map(|g| g.cores.iter().copied())
            .collect()
    }
}

/// Which threads a phase line targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSetting {
    pub vm: VmId,
    /// `None` for both classes.
    pub class: Option<ThreadClass>,
    pub load: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub start: f64,
    pub settings: Vec<LoadSetting>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: ModelParams,
    pub cores: CoreSpec,
    pub vms: Vec<VmSpec>,
    /// Sorted by start time.
    pub phases: Vec<Phase>,
}

impl Scenario {
    /// Load multipliers in force at time `t`, keyed by VM and class.
    pub fn loads_at(&self, t: f64) -> BTreeMap<(VmId, ThreadClass), f64> {
        let mut out = BTreeMap::new();
        for vm in &self.vms {
            for class in [ThreadClass::Vcpu, ThreadClass::Emulator] {
                out.insert((vm.id.clone(), class), 1.0);
            }
        }
        for phase in self.phases.iter().take_while(|p| p.start <= t + 1e-9) {
            for s in &phase.settings {
                for class in [ThreadClass::Vcpu, ThreadClass::Emulator] {
                    if s.class.map_or(true, |c| c == class) {
                        out.insert((s.vm.clone(), class), s.load);
                    }
                }
            }
        }
        out
    }

    pub fn vm(&self, id: &VmId) -> Option<&VmSpec> {
        self.vms.iter().find(|v| &v.id == id)
    }

    /// Same scenario with every emulator group bound to its VM's vCPU cores.
    pub fn with_baseline_affinity(&self) -> Scenario {
        let mut s = self.clone();
        for vm in &mut s.vms {
            let cores = vm.vcpu_cores();
            for g in &mut vm.groups {
                if g.class == ThreadClass::Emulator {
                    g.cores = cores.clone();
                }
            }
        }
        s
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let m = &self.model;
        let bad = |msg: String| Err(SimError::InvalidScenario(msg));
        if !(m.duration > 0.0 && m.dt > 0.0 && m.duration.is_finite()) {
            return bad("duration and dt must be positive".into());
        }
        if !(m.alpha >= 0.0 && m.beta >= 0.0 && m.base_ns >= 0.0) {
            return bad("alpha, beta and base_ns must be non-negative".into());
        }
        if !(0.0..1.0).contains(&m.jitter) {
            return bad(format!("jitter must lie in [0, 1), got {}", m.jitter));
        }
        let c = &self.cores;
        if c.small + c.big == 0 {
            return bad("no cores".into());
        }
        if !(c.small_capacity > 0.0 && c.big_capacity > 0.0) {
            return bad("core capacities must be positive".into());
        }
        let all = c.all_cores();
        let mut ids = std::collections::BTreeSet::new();
        for vm in &self.vms {
            if !ids.insert(vm.id.clone()) {
                return bad(format!("duplicate vm {}", vm.id));
            }
            for g in &vm.groups {
                if g.cores.is_empty() {
                    return Err(SimError::UnaffinedThread(format!("{} {}", vm.id, g.class.as_str())));
                }
                if let Some(x) = g.cores.iter().find(|x| !all.contains(x)) {
                    return bad(format!("{}: core {x} does not exist", vm.id));
                }
                if !(0.0..=1.0).contains(&g.demand) {
                    return bad(format!("{}: demand {} outside [0, 1]", vm.id, g.demand));
                }
            }
        }
        for p in &self.phases {
            for s in &p.settings {
                if self.vm(&s.vm).is_none() {
                    return bad(format!("phase {}: unknown vm {}", p.start, s.vm));
                }
                if !(s.load >= 0.0 && s.load.is_finite()) {
                    return bad(format!("phase {}: load must be non-negative", p.start));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Scenario, SimError> {
        let doc = Document::parse(text)?;
        let root = doc.root();
        root.check_keys(&["version"])?;
        match root.get("version") {
            None => {
                return Err(SimError::Parse(ConfigError::Missing {
                    section: String::new(),
                    msg: "missing `version = 1`".into(),
                }))
            }
            Some(e) if e.value != SCENARIO_VERSION.to_string() => {
                return Err(SimError::Parse(root.value_error(e, format!("unsupported version (expected {SCENARIO_VERSION})"))))
            }
            Some(_) => {}
        }
        let mut model = ModelParams::default();
        let mut cores = CoreSpec::default();
        let mut vms = Vec::new();
        let mut phases = Vec::new();
        let mut phase_lines = Vec::new();
        for s in doc.sections.iter().skip(1) {
            match s.kind() {
                "model" if s.label().is_empty() => {
                    s.check_keys(&["duration", "dt", "alpha", "beta", "base_ns", "spread", "seed", "jitter"])?;
                    opt(&mut model.duration, s.parse("duration")?);
                    opt(&mut model.dt, s.parse("dt")?);
                    opt(&mut model.alpha, s.parse("alpha")?);
                    opt(&mut model.beta, s.parse("beta")?);
                    opt(&mut model.base_ns, s.parse("base_ns")?);
                    opt(&mut model.spread, s.parse("spread")?);
                    opt(&mut model.seed, s.parse("seed")?);
                    opt(&mut model.jitter, s.parse("jitter")?);
                }
                "cores" if s.label().is_empty() => {
                    s.check_keys(&["small", "big", "small_capacity", "big_capacity"])?;
                    opt(&mut cores.small, s.parse("small")?);
                    opt(&mut cores.big, s.parse("big")?);
                    opt(&mut cores.small_capacity, s.parse("small_capacity")?);
                    opt(&mut cores.big_capacity, s.parse("big_capacity")?);
                }
                "vm" if !s.label().is_empty() && !s.label().contains(' ') => {
                    s.check_keys(&["vcpu", "emulator"])?;
                    let mut groups = Vec::new();
                    for e in &s.entries {
                        let class = ThreadClass::parse(&e.key).expect("checked key");
                        groups.push(parse_group(s, e, class)?);
                    }
                    vms.push(VmSpec {
                        id: VmId::new(s.label()),
                        groups,
                    });
                }
                "phase" => {
                    let start: f64 = s.label().parse().map_err(|_| {
                        SimError::Parse(ConfigError::Syntax {
                            line: s.line,
                            msg: format!("phase start {:?} is not a number", s.label()),
                        })
                    })?;
                    phase_lines.push((start, s));
                }
                _ => {
                    return Err(SimError::Parse(ConfigError::Syntax {
                        line: s.line,
                        msg: format!("unknown section [{}]", s.name),
                    }))
                }
            }
        }
        for (start, s) in phase_lines {
            let mut settings = Vec::new();
            for e in &s.entries {
                let parts: Vec<&str> = e.key.split('.').collect();
                let (vm, class) = match parts.as_slice() {
                    [vm, "load"] => (*vm, None),
                    [vm, class, "load"] => match ThreadClass::parse(class) {
                        Some(c) => (*vm, Some(c)),
                        None => return Err(SimError::Parse(s.value_error(e, "class must be vcpu or emulator"))),
                    },
                    _ => return Err(SimError::Parse(s.value_error(e, "expected <vm>.load or <vm>.<class>.load"))),
                };
                let load: f64 = e
                    .value
                    .parse()
                    .map_err(|err: std::num::ParseFloatError| SimError::Parse(s.value_error(e, err.to_string())))?;
                if !vms.iter().any(|v: &VmSpec| v.id.as_str() == vm) {
                    return Err(SimError::Parse(s.value_error(e, format!("unknown vm {vm:?}"))));
                }
                settings.push(LoadSetting {
                    vm: VmId::new(vm),
                    class,
                    load,
                });
            }
            phases.push(Phase { start, settings });
        }
        phases.sort_by(|a, b| a.start.total_cmp(&b.start));
        let sc = Scenario {
            model,
            cores,
            vms,
            phases,
        };
        sc.validate()?;
        Ok(sc)
    }

    /// Text form accepted by [`Scenario::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let c = &self.cores;
        let mut out = String::new();
        let _ = writeln!(out, "version = {SCENARIO_VERSION}\n");
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "duration = {}", m.duration);
        let _ = writeln!(out, "dt = {}", m.dt);
        let _ = writeln!(out, "alpha = {}", m.alpha);
        let _ = writeln!(out, "beta = {}", m.beta);
        let _ = writeln!(out, "base_ns = {}", m.base_ns);
        let _ = writeln!(out, "spread = {}", m.spread.as_str());
        let _ = writeln!(out, "seed = {}", m.seed);
        let _ = writeln!(out, "jitter = {}\n", m.jitter);
        let _ = writeln!(out, "[cores]");
        let _ = writeln!(out, "small = {}", c.small);
        let _ = writeln!(out, "big = {}", c.big);
        let _ = writeln!(out, "small_capacity = {}", c.small_capacity);
        let _ = writeln!(out, "big_capacity = {}", c.big_capacity);
        for vm in &self.vms {
            let _ = writeln!(out, "\n[vm {}]", vm.id);
            for g in &vm.groups {
                let _ = writeln!(
                    out,
                    "{} = {} cores={} demand={}",
                    g.class.as_str(),
                    g.count,
                    format_cpulist(&g.cores).unwrap_or_default(),
                    g.demand
                );
            }
        }
        for p in &self.phases {
            let _ = writeln!(out, "\n[phase {}]", p.start);
            for s in &p.settings {
                match s.class {
                    None => {
                        let _ = writeln!(out, "{}.load = {}", s.vm, s.load);
                    }
                    Some(c) => {
                        let _ = writeln!(out, "{}.{}.load = {}", s.vm, c.as_str(), s.load);
                    }
                }
            }
        }
        out
    }
}

fn opt<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_group(s: &Section, e: &crate::config::Entry, class: ThreadClass) -> Result<ThreadGroup, SimError> {
    let err = |msg: String| SimError::Parse(s.value_error(e, msg));
    let mut words = e.value.split_whitespace();
    let count: usize = words
        .next()
        .ok_or_else(|| err("missing thread count".into()))?
        .parse()
        .map_err(|_| err("thread count must be a non-negative integer".into()))?;
    let mut cores = None;
    let mut demand = None;
    for w in words {
        match w.split_once('=') {
            Some(("cores", v)) => cores = Some(parse_cpulist(v).map_err(|x| err(x.to_string()))?),
            Some(("demand", v)) => demand = Some(v.parse::<f64>().map_err(|x| err(x.to_string()))?),
            _ => return Err(err(format!("unexpected {w:?} (expected cores=<list> demand=<d>)"))),
        }
    }
    Ok(ThreadGroup {
        class,
        count,
        cores: cores.ok_or_else(|| err("missing cores=".into()))?,
        demand: demand.ok_or_else(|| err("missing demand=".into()))?,
    })
}

/// Two co-located VMs on 4 small + 4 big cores. VM `hi` runs I/O-heavy
/// emulator threads, VM `lo` a light one. Each VM floats four vCPUs over the
/// big cores and two over the small cores, so the big cores are close to
/// saturation while the small cores keep some headroom.
pub fn reference_scenario() -> Scenario {
    let mut sc = generated(0.95, 0.5, (0.55, 2), 0.2, 0);
    sc.model.jitter = 0.0;
    sc
}

fn generated(big_vcpu: f64, small_vcpu: f64, hi_emu: (f64, usize), lo_emu: f64, seed: u64) -> Scenario {
    let cores = CoreSpec::default();
    let small = cores.small_cores();
    let big = cores.big_cores();
    let all = cores.all_cores();
    let vm = |id: &str, emu: f64, emu_count: usize| VmSpec {
        id: VmId::new(id),
        groups: vec![
            ThreadGroup {
                class: ThreadClass::Vcpu,
                count: 4,
                cores: big.clone(),
                demand: big_vcpu,
            },
            ThreadGroup {
                class: ThreadClass::Vcpu,
                count: 2,
                cores: small.clone(),
                demand: small_vcpu,
            },
            ThreadGroup {
                class: ThreadClass::Emulator,
                count: emu_count,
                cores: all.clone(),
                demand: emu,
            },
        ],
    };
    Scenario {
        model: ModelParams {
            seed,
            jitter: 0.03,
            ..ModelParams::default()
        },
        cores,
        vms: vec![vm("hi", hi_emu.0, hi_emu.1), vm("lo", lo_emu, 1)],
        phases: Vec::new(),
    }
}

/// `count` randomized variants of the reference scenario.
pub fn reference_suite(seed: u64, count: usize) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            // Nominal small-core load with every emulator on the small cores
            // stays at or below 0.9: 4 * 0.5 + 1.3 + 0.3 = 3.6 of 4.
            let big_vcpu = rng.gen_range(0.9..=1.0);
            let small_vcpu = rng.gen_range(0.3..=0.5);
            let hi_count = rng.gen_range(2..=3);
            let hi_total = rng.gen_range(0.8..=1.3);
            let lo = rng.gen_range(0.1..=0.3);
            generated(
                round3(big_vcpu),
                round3(small_vcpu),
                (round3(hi_total / hi_count as f64), hi_count),
                round3(lo),
                seed.wrapping_mul(1000).wrapping_add(i as u64),
            )
        })
        .collect()
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
