use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use emuctl_cli::{cmd_enumerate, cmd_replay, cmd_report};
use emuctl_core::controller::ControllerConfig;
use emuctl_core::simkvm::{reference_scenario, Simulator};
use emuctl_core::CoreSet;

fn emuctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emuctl"))
        .args(args)
        .output()
        .expect("spawn emuctl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn enumerate_examples() {
    for (args, want) in [
        (&["--small", "4", "--big", "4", "--vms", "2", "--sizes", "1,2,4,8"][..], "220"),
        (&["--small", "4", "--big", "4", "--vms", "2"][..], "1225"),
        (&["--small", "1", "--big", "0", "--vms", "1"][..], "2"),
        (&["--small", "1", "--big", "1", "--vms", "1"][..], "4"),
    ] {
        let mut full = vec!["enumerate"];
        full.extend_from_slice(args);
        let o = emuctl(&full);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).trim(), want);
    }
}

#[test]
fn enumerate_verbose_lists_sorted_signatures() {
    let o = emuctl(&["--verbose", "enumerate", "--small", "1", "--big", "1", "--vms", "1"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "4");
    let sigs = &lines[1..];
    assert_eq!(sigs.len(), 4);
    let mut sorted = sigs.to_vec();
    sorted.sort();
    assert_eq!(sigs, &sorted[..]);
    assert!(sigs.contains(&"big:{1}=1;small:{}=1"), "{sigs:?}");
    let (n, listed) = cmd_enumerate(1, 1, 1, None).unwrap();
    assert_eq!(n, 4);
    assert_eq!(listed, sigs);
}

#[test]
fn enumerate_refuses_huge_spaces() {
    let o = emuctl(&["enumerate", "--small", "16", "--big", "16", "--vms", "4"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("too large"), "{}", stderr(&o));
}

#[test]
fn simulate_reference_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = emuctl(&["simulate", "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trace_controller.csv", "trace_baseline.csv", "decisions.csv", "summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(dir.path().join("trace_controller.csv")).unwrap();
    for vm in ["hi", "lo"] {
        let rows = trace.lines().skip(1).filter(|l| l.split(',').nth(2) == Some(vm)).count();
        assert_eq!(rows, 120, "{vm}");
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (c, b): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(c <= b, "{line}");
    }
    let decisions = fs::read_to_string(dir.path().join("decisions.csv")).unwrap();
    assert_eq!(decisions.lines().next(), Some("timestamp,state,vm_id,action,cpulist"));
}

#[test]
fn simulate_reports_scenario_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("bad.scn");
    fs::write(&sc, "version = 1\n\n[model]\nduration = 120\ndt = fast\n").unwrap();
    let o = emuctl(&["simulate", "--scenario", p(&sc), "--out", p(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn simulate_round_trips_the_reference_scenario_file() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("ref.scn");
    fs::write(&sc, reference_scenario().to_text()).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(emuctl(&["simulate", "--scenario", p(&sc), "--out", p(&a)]).status.success());
    assert!(emuctl(&["simulate", "--out", p(&b)]).status.success());
    for f in ["trace_controller.csv", "decisions.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

fn series_csv(dir: &Path, values: impl IntoIterator<Item = (f64, f64)>) -> PathBuf {
    let mut text = String::from("time_s,latency_proxy\n");
    for (t, v) in values {
        let _ = writeln!(text, "{t},{v}");
    }
    let path = dir.join("series.csv");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn report_protocol() {
    let dir = tempfile::tempdir().unwrap();
    // 120 one-second samples; the retained middle is 1..=100.
    let path = series_csv(dir.path(), (0..120).map(|i| (i as f64, (i as f64 - 9.0).clamp(0.0, 101.0))));
    let o = emuctl(&["report", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "vm_id,retained,p95,mean,max,peaks\nall,100,95,50.5,100,0\n");

    let path = series_csv(dir.path(), (0..60).map(|i| (i as f64, 7.5)));
    let rows = cmd_report(&path, "latency_proxy").unwrap();
    assert_eq!(rows[0].1.p95, 7.5);

    let path = series_csv(dir.path(), (0..20).map(|i| (i as f64, 1.0)));
    let o = emuctl(&["report", p(&path)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("too few samples"), "{}", stderr(&o));
}

#[test]
fn report_groups_simulation_traces_by_vm() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emuctl(&["simulate", "--out", p(dir.path())]).status.success());
    let out = dir.path().join("report.csv");
    let o = emuctl(&[
        "report",
        p(&dir.path().join("trace_baseline.csv")),
        "--column",
        "emu_delay_rate",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out).unwrap();
    let vms: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(vms, ["hi", "lo"]);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(1) == Some("100")));
}

/// Two VMs with steady counters; `bump` adds emulator run delay to `vm2` on
/// the listed ticks.
fn synthetic_trace(dir: &Path, ticks: u64, bump: &[u64]) -> PathBuf {
    let mut text = String::from("timestamp_ns,kind,vm_id,id,class,cpu_time_ns,run_delay_ns,timeslices,util\n");
    let mut emu_delay = [0u64; 2];
    for t in 0..ticks {
        let ts = 1_000_000_000 + t * 1_000_000_000;
        for (i, vm) in ["vm1", "vm2"].iter().enumerate() {
            let base = 1000 * (i as u64 + 1);
            emu_delay[i] += 1_000_000 * (i as u64 + 1);
            if i == 1 && bump.contains(&t) {
                emu_delay[i] += 40_000_000;
            }
            let _ = writeln!(text, "{ts},thread,{vm},{base},emulator,{},{},{},", t * 200_000_000, emu_delay[i], t * 50);
            for v in 1..=2u64 {
                let _ = writeln!(
                    text,
                    "{ts},thread,{vm},{},vcpu,{},{},{},",
                    base + v,
                    t * 600_000_000,
                    t * 1_000_000,
                    t * 150
                );
            }
        }
        if t > 0 {
            for c in 0..8 {
                let _ = writeln!(text, "{ts},core,,{c},,,,,0.5");
            }
        }
    }
    let path = dir.join(format!("trace_{}.csv", bump.len()));
    fs::write(&path, text).unwrap();
    path
}

fn small4() -> CoreSet {
    (0..4).collect()
}

#[test]
fn replay_of_stable_trace_binds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let trace = synthetic_trace(dir.path(), 100, &[]);
    let out = cmd_replay(&trace, &ControllerConfig::default(), &small4(), true).unwrap();
    assert_eq!(out.binds(), 0);
    assert_eq!(out.final_state.as_str(), "STABLE");
}

#[test]
fn replay_of_three_tick_anomaly_rebinds_once() {
    let dir = tempfile::tempdir().unwrap();
    let trace = synthetic_trace(dir.path(), 100, &[40, 41, 42]);
    let out = cmd_replay(&trace, &ControllerConfig::default(), &small4(), true).unwrap();
    let binds: Vec<_> = out.decisions.iter().filter(|d| d.action == "BIND").collect();
    assert!(!binds.is_empty());
    assert!(binds.iter().all(|d| d.vm_id == "vm2"), "{binds:?}");
    let rebinds: Vec<_> = binds.iter().filter(|d| d.cpulist == "0-3").collect();
    assert_eq!(rebinds.len(), 1, "{binds:?}");
    assert_eq!(rebinds[0].state.as_str(), "OSCILLATION");
    // The rest are the downscaling probes that follow.
    assert!(binds[1..].iter().all(|d| d.state.as_str() == "DOWNSCALING"));
    assert_eq!(out.final_state.as_str(), "STABLE");

    let two = synthetic_trace(dir.path(), 100, &[40, 41]);
    let out = cmd_replay(&two, &ControllerConfig::default(), &small4(), true).unwrap();
    assert_eq!(out.binds(), 0);
}

#[test]
fn replay_is_deterministic_and_reports_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let trace = synthetic_trace(dir.path(), 60, &[30, 31, 32]);
    let a = emuctl(&["replay", p(&trace), "--small", "0-3", "--start-stable"]);
    let b = emuctl(&["replay", p(&trace), "--small", "0-3", "--start-stable"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).starts_with("timestamp,state,vm_id,action,cpulist\n"));

    // From INITIAL the replay binds both VMs first.
    let c = emuctl(&["replay", p(&trace), "--small", "0-3"]);
    assert!(stdout(&c).contains(",INITIAL,vm1,BIND,0-3"));

    let mut text = fs::read_to_string(&trace).unwrap();
    text = text.replacen(",vcpu,", ",gpu,", 1);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, text).unwrap();
    let o = emuctl(&["replay", p(&bad), "--small", "0-3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

/// A proc tree dumped from the simulator, plus a unified cgroup root.
fn host_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut sim = Simulator::new(reference_scenario()).unwrap();
    sim.step().unwrap();
    let proc_root = dir.join("proc");
    sim.dump_procfs(&proc_root).unwrap();
    let cg = dir.join("cgroup");
    fs::create_dir_all(&cg).unwrap();
    fs::write(cg.join("cgroup.controllers"), "cpuset cpu\n").unwrap();
    (proc_root, cg)
}

fn tree(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        }
        out.push(p);
    }
    out.sort();
    out
}

#[test]
fn daemon_dry_run_logs_without_writing_cgroups() {
    let dir = tempfile::tempdir().unwrap();
    let (proc_root, cg) = host_fixture(dir.path());
    let before = tree(&cg);
    let log = dir.path().join("decisions.csv");
    let rec = dir.path().join("snapshots.csv");
    let cfg = dir.path().join("emuctl.conf");
    fs::write(&cfg, "[controller]\ntick_period = 0\n[topology]\nsmall = 0-3\n").unwrap();
    let o = emuctl(&[
        "daemon",
        "--config",
        p(&cfg),
        "--dry-run",
        "--procroot",
        p(&proc_root),
        "--cgroup-root",
        p(&cg),
        "--out",
        p(&log),
        "--record",
        p(&rec),
        "--ticks",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "timestamp,state,vm_id,action,cpulist");
    assert!(lines.iter().any(|l| l.ends_with(",INITIAL,hi,BIND,0-3")), "{text}");
    assert!(lines.last().unwrap().contains(",NO_OP,"));
    assert_eq!(tree(&cg), before);

    // The recording replays.
    let r = emuctl(&["replay", p(&rec), "--small", "0-3"]);
    assert!(r.status.success(), "{}", stderr(&r));
}

#[test]
fn daemon_rejects_unreadable_procroot() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-proc");
    let o = emuctl(&["daemon", "--dry-run", "--small", "0-3", "--procroot", p(&missing), "--ticks", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn daemon_requires_a_cgroup_hierarchy_unless_dry_run() {
    let dir = tempfile::tempdir().unwrap();
    let (proc_root, _) = host_fixture(dir.path());
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = emuctl(&[
        "daemon",
        "--small",
        "0-3",
        "--procroot",
        p(&proc_root),
        "--cgroup-root",
        p(&empty),
        "--ticks",
        "1",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(p(&empty)), "{}", stderr(&o));
}

#[test]
fn daemon_stops_cleanly_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let (proc_root, _) = host_fixture(dir.path());
    let log = dir.path().join("decisions.csv");
    let cfg = dir.path().join("emuctl.conf");
    fs::write(&cfg, "[controller]\ntick_period = 0.1\n[topology]\nsmall = 0-3\n").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_emuctl"))
        .args(["daemon", "--config", p(&cfg), "--dry-run", "--procroot", p(&proc_root), "--out", p(&log)])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    // Wait until the first tick has been logged.
    let start = Instant::now();
    while fs::read_to_string(&log).map_or(true, |t| !t.contains("BIND")) {
        assert!(start.elapsed() < Duration::from_secs(10), "daemon produced no decisions");
        std::thread::sleep(Duration::from_millis(20));
    }
    // SAFETY: plain kill(2) on our own child.
    assert_eq!(unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGTERM) }, 0);
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
    let text = fs::read_to_string(&log).unwrap();
    assert!(text.lines().last().unwrap().contains(",NO_OP,"), "{text}");
}

#[test]
fn default_config_parses() {
    let o = emuctl(&["default-config"]);
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.conf");
    fs::write(&path, &o.stdout).unwrap();
    let cfg = emuctl_cli::load_config(Some(&path)).unwrap();
    assert_eq!(cfg.controller, ControllerConfig::default());
    assert_eq!(cfg.small_cores, Some(small4()));
}

#[test]
fn shipped_reference_scenario_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference.scn");
    let loaded = emuctl_cli::load_scenario(Some(&path)).unwrap();
    assert_eq!(loaded, reference_scenario());
}
