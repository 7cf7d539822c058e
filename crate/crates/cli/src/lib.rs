//! Command implementations behind the `emuctl` binary.

pub mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use emuctl_core::actuator::{
    apply_binding, ActuatorBackend, AffinityBackend, BindingRequest, CgroupBackend, RecordingBackend,
};
use emuctl_core::config::{AppConfig, BackendKind};
use emuctl_core::controller::{Controller, ControllerConfig, DecisionLog, DecisionRecord, StateName};
use emuctl_core::pipeline::ControlLoop;
use emuctl_core::report::{summarize, SeriesSummary};
use emuctl_core::simkvm::{
    reference_scenario, reference_suite, run_baseline, run_controller, RunSummary, Scenario, TRACE_HEADER,
};
use emuctl_core::strategy::{enumerate_strategies, DEFAULT_ENUMERATION_CAP};
use emuctl_core::telemetry::{Collector, DiscoveryConfig, ProcFs, TelemetrySource};
use emuctl_core::{CoreSet, VmId};

use snapshot::{read_recording, SnapshotWriter};

/// Reads and parses a config file, or returns the defaults.
pub fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    let Some(path) = path else {
        return Ok(AppConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    AppConfig::parse(&text).with_context(|| format!("config {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

// ---- enumerate -------------------------------------------------------------

/// Number of distinct strategies and their signatures in sorted text form.
pub fn cmd_enumerate(n: usize, m: usize, x: usize, sizes: Option<&[usize]>) -> Result<(usize, Vec<String>)> {
    let allowed: Option<BTreeSet<usize>> = sizes.map(|s| s.iter().copied().collect());
    let sigs = enumerate_strategies(n, m, x, allowed.as_ref(), DEFAULT_ENUMERATION_CAP)?;
    let mut lines: Vec<String> = sigs.iter().map(|s| s.to_string()).collect();
    lines.sort();
    Ok((lines.len(), lines))
}

// ---- report ----------------------------------------------------------------

pub const REPORT_HEADER: &str = "vm_id,retained,p95,mean,max,peaks";

/// Time column of a trace in order of preference, with its scale to seconds.
const TIME_COLUMNS: [(&str, f64); 3] = [("time_s", 1.0), ("timestamp", 1.0), ("timestamp_ns", 1e-9)];

/// Trimmed aggregates of `column` per VM (a single `all` group when the
/// input has no `vm_id` column).
pub fn cmd_report(input: &Path, column: &str) -> Result<Vec<(String, SeriesSummary)>> {
    let mut rdr = csv::Reader::from_path(input).with_context(|| format!("cannot read {}", input.display()))?;
    let header = rdr.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let (tcol, scale) = TIME_COLUMNS
        .iter()
        .find_map(|(n, s)| find(n).map(|i| (i, *s)))
        .ok_or_else(|| anyhow!("row 1: no time column (one of time_s, timestamp, timestamp_ns)"))?;
    let vcol = find(column).ok_or_else(|| anyhow!("row 1: no column {column:?}"))?;
    let vm_col = find("vm_id");
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, r) in rdr.records().enumerate() {
        let row = i + 2;
        let r = r.with_context(|| format!("row {row}"))?;
        let get = |c: usize| r.get(c).unwrap_or("").trim();
        let t: f64 = get(tcol)
            .parse()
            .map_err(|e| anyhow!("row {row}: time {:?}: {e}", get(tcol)))?;
        let v: f64 = get(vcol)
            .parse()
            .map_err(|e| anyhow!("row {row}: {column} {:?}: {e}", get(vcol)))?;
        let vm = vm_col.map_or("all", |c| get(c)).to_string();
        series.entry(vm).or_default().push((t * scale, v));
    }
    if series.is_empty() {
        bail!("{}: no samples", input.display());
    }
    series
        .into_iter()
        .map(|(vm, s)| {
            let summary = summarize(&s).with_context(|| format!("vm {vm}"))?;
            Ok((vm, summary))
        })
        .collect()
}

pub fn write_report<W: Write>(out: &mut W, rows: &[(String, SeriesSummary)]) -> io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for (vm, s) in rows {
        writeln!(out, "{vm},{},{},{},{},{}", s.retained, s.p95, s.mean, s.max, s.peaks)?;
    }
    Ok(())
}

// ---- simulate --------------------------------------------------------------

pub fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    match path {
        None => Ok(reference_scenario()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read scenario {}", p.display()))?;
            Scenario::parse(&text).with_context(|| format!("scenario {}", p.display()))
        }
    }
}

/// Runs `scenario` with the controller and with the baseline binding and
/// writes `trace_controller.csv`, `trace_baseline.csv`, `decisions.csv` and
/// `summary.csv` into `out`.
pub fn cmd_simulate(scenario: &Scenario, cfg: &ControllerConfig, out: &Path) -> Result<Vec<RunSummary>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let ctl = run_controller(scenario, cfg)?;
    let base = run_baseline(scenario)?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    };
    write("trace_controller.csv", &ctl.to_csv())?;
    write("trace_baseline.csv", &base.to_csv())?;
    write("decisions.csv", &ctl.decisions_csv())?;
    let summary = RunSummary::compare(&ctl, &base);
    let mut text = format!("{}\n", RunSummary::HEADER);
    for s in &summary {
        text.push_str(&s.to_csv());
        text.push('\n');
    }
    write("summary.csv", &text)?;
    info!("wrote traces for {} VMs to {}", summary.len(), out.display());
    Ok(summary)
}

pub const SUITE_HEADER: &str = "scenario,vm_id,controller_p95,baseline_p95,samples,converged_at";

/// Runs the seeded reference suite and writes `suite.csv` into `out`.
pub fn cmd_simulate_suite(seed: u64, count: usize, cfg: &ControllerConfig, out: &Path) -> Result<Vec<(usize, RunSummary)>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut rows = Vec::new();
    for (i, sc) in reference_suite(seed, count).iter().enumerate() {
        let ctl = run_controller(sc, cfg)?;
        let base = run_baseline(sc)?;
        rows.extend(RunSummary::compare(&ctl, &base).into_iter().map(|s| (i, s)));
    }
    let mut text = format!("{SUITE_HEADER}\n");
    for (i, s) in &rows {
        text.push_str(&format!("{i},{}\n", s.to_csv()));
    }
    let p = out.join("suite.csv");
    fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?;
    Ok(rows)
}

/// Header of the per-tick trace files written by `simulate`.
pub fn trace_header() -> &'static str {
    TRACE_HEADER
}

// ---- replay ----------------------------------------------------------------

pub struct ReplayOutcome {
    pub decisions: Vec<DecisionRecord>,
    pub final_state: StateName,
}

impl ReplayOutcome {
    pub fn binds(&self) -> usize {
        self.decisions.iter().filter(|d| d.action == "BIND").count()
    }

    pub fn write_log<W: Write>(&self, out: W) -> io::Result<()> {
        let mut log = DecisionLog::new(out)?;
        for d in &self.decisions {
            log.record(d)?;
        }
        log.flush()
    }
}

/// Feeds a recorded snapshot CSV through the controller with a recording
/// actuator. With `start_stable` the controller assumes the recording begins
/// after convergence, every VM bound to all small cores.
pub fn cmd_replay(trace: &Path, cfg: &ControllerConfig, small: &CoreSet, start_stable: bool) -> Result<ReplayOutcome> {
    let f = File::open(trace).with_context(|| format!("cannot read trace {}", trace.display()))?;
    let rec = read_recording(io::BufReader::new(f)).with_context(|| format!("trace {}", trace.display()))?;
    let discovery = DiscoveryConfig::default();
    let vms = rec.vm_records(discovery.ring_capacity);
    let ids: Vec<VmId> = vms.iter().map(|v| v.vm_id.clone()).collect();
    let mut controller = Controller::new(cfg.clone(), small.clone())?;
    if start_stable {
        controller.start_stable(ids);
    }
    let mut lp = ControlLoop::new(Collector::new(discovery, vms), controller);
    let mut backend = RecordingBackend::new();
    let t0 = rec.snapshots.first().map_or(0, |s| s.timestamp_ns);
    let secs = |ns: u64| (ns - t0) as f64 / 1e9;
    let mut decisions = Vec::new();
    for snap in &rec.snapshots {
        let step = lp.step_recorded(snap);
        for a in &step.actions {
            decisions.push(DecisionRecord::from_action(secs(snap.timestamp_ns), step.state, a));
        }
        for (vm, r) in lp.apply(&mut backend, &step.actions) {
            if let Err(e) = r {
                warn!("{vm}: {e}");
            }
        }
    }
    let end = rec.snapshots.last().map_or(0.0, |s| secs(s.timestamp_ns));
    let final_state = lp.controller().state_name();
    decisions.push(DecisionRecord::no_op(end, final_state));
    Ok(ReplayOutcome { decisions, final_state })
}

// ---- daemon ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DaemonOptions {
    pub config: AppConfig,
    pub dry_run: bool,
    /// Stop after this many ticks.
    pub ticks: Option<u64>,
    /// Decision log path; stdout when absent.
    pub log: Option<PathBuf>,
    /// Optional snapshot CSV of everything collected.
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaemonSummary {
    pub ticks: u64,
    pub decisions: usize,
    pub final_state: StateName,
}

fn check_procroot(root: &Path) -> Result<()> {
    fs::read_dir(root).with_context(|| format!("procroot {} is not readable", root.display()))?;
    ProcFs::new(root)
        .stat()
        .map_err(|e| anyhow!("procroot {}: {e}", root.display()))?;
    Ok(())
}

fn backend(opts: &DaemonOptions) -> Result<Box<dyn ActuatorBackend>> {
    let c = &opts.config;
    if opts.dry_run {
        return Ok(Box::new(RecordingBackend::new()));
    }
    Ok(match c.backend {
        BackendKind::Cgroup => Box::new(
            CgroupBackend::new(&c.cgroup_root, &c.slice_template, &c.procroot)
                .with_context(|| format!("cgroup root {}", c.cgroup_root.display()))?,
        ),
        BackendKind::Affinity => Box::new(AffinityBackend::new()),
    })
}

/// Sleeps for `period` or until `stop` is raised.
fn pause(period: Duration, stop: &AtomicBool) {
    let end = Instant::now() + period;
    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        if now >= end {
            return;
        }
        std::thread::sleep((end - now).min(Duration::from_millis(50)));
    }
}

/// discover → snapshot → tick → apply, once per tick period, until `stop` is
/// raised or the tick budget runs out. Failed bindings are retried on the next
/// tick.
pub fn cmd_daemon(opts: &DaemonOptions, stop: &AtomicBool) -> Result<DaemonSummary> {
    let c = &opts.config;
    check_procroot(&c.procroot)?;
    let small = c
        .small_cores
        .clone()
        .ok_or_else(|| anyhow!("small cores unknown: set [topology] small or pass --small"))?;
    let mut backend = backend(opts)?;
    let source = ProcFs::new(&c.procroot);
    let collector = Collector::discover(&source, c.discovery.clone())?;
    info!(
        "monitoring {} VMs: {:?}",
        collector.vms().len(),
        collector.vms().iter().map(|v| v.vm_id.as_str()).collect::<Vec<_>>()
    );
    let controller = Controller::new(c.controller.clone(), small)?;
    let mut lp = ControlLoop::new(collector, controller);
    let mut log = DecisionLog::new(sink(opts.log.as_deref())?)?;
    let mut recorder = match &opts.record {
        Some(p) => Some(SnapshotWriter::new(create(p)?)?),
        None => None,
    };
    let period = Duration::from_secs_f64(c.controller.tick_period);
    let mut retry: BTreeMap<VmId, BindingRequest> = BTreeMap::new();
    let mut ticks = 0;
    let mut last_ts = 0.0;
    while !stop.load(Ordering::Relaxed) && opts.ticks.map_or(true, |n| ticks < n) {
        let (snap, step) = match lp.step(&source) {
            Ok(v) => v,
            Err(e) => {
                warn!("collection failed: {e}");
                pause(period, stop);
                continue;
            }
        };
        ticks += 1;
        last_ts = snap.timestamp_ns as f64 / 1e9;
        if let Some(w) = recorder.as_mut() {
            w.write(&snap, lp.collector().vms())?;
        }
        log.record_tick(last_ts, step.state, &step.actions)?;
        let mut requests: BTreeMap<VmId, BindingRequest> = std::mem::take(&mut retry);
        for r in lp.requests(&step.actions) {
            requests.insert(r.vm_id.clone(), r);
        }
        for (vm, req) in requests {
            match apply_binding(backend.as_mut(), &req) {
                Ok(rep) if !rep.vanished.is_empty() => info!("{vm}: threads {:?} exited", rep.vanished),
                Ok(_) => {}
                Err(e) => {
                    warn!("{vm}: {e}; retrying next tick");
                    retry.insert(vm, req);
                }
            }
        }
        log.flush()?;
        if let Some(w) = recorder.as_mut() {
            w.flush()?;
        }
        if opts.ticks.map_or(true, |n| ticks < n) {
            pause(period, stop);
        }
    }
    let final_state = lp.controller().state_name();
    log.record(&DecisionRecord::no_op(last_ts, final_state))?;
    log.flush()?;
    info!("stopped after {ticks} ticks in {final_state}");
    Ok(DaemonSummary {
        ticks,
        decisions: log.records(),
        final_state,
    })
}
