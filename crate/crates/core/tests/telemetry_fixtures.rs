use std::fs;
use std::path::{Path, PathBuf};

use emuctl_core::metrics::{emulator_ratio, latest_vm_metrics};
use emuctl_core::telemetry::{
    discover_vms, parse_schedstat, Collector, DiscoveryConfig, ProcFs, RawSchedstat, RingBuffer,
};
use emuctl_core::{ThreadClass, VmId};
use proptest::prelude::*;

fn fixture_dir(kind: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/schedstat")
        .join(kind)
}

fn fixture_files(kind: &str) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(fixture_dir(kind))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    files
}

#[test]
fn schedstat_corpus_round_trips_bit_exactly() {
    let files = fixture_files("valid");
    assert!(files.len() >= 5);
    for path in files {
        let raw = fs::read(&path).unwrap();
        let text = std::str::from_utf8(&raw).unwrap();
        let parsed = parse_schedstat(text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let back = format!("{parsed}\n");
        assert_eq!(back.as_bytes(), &raw[..], "{}", path.display());
    }
}

#[test]
fn malformed_corpus_is_rejected() {
    for path in fixture_files("invalid") {
        let text = fs::read_to_string(&path).unwrap();
        assert!(parse_schedstat(&text).is_err(), "{} parsed", path.display());
    }
}

struct FakeProc {
    dir: tempfile::TempDir,
}

impl FakeProc {
    fn new() -> Self {
        let f = FakeProc {
            dir: tempfile::tempdir().unwrap(),
        };
        f.write_stat(0);
        f
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn write_stat(&self, tick: u64) {
        let mut s = String::from("cpu  0 0 0 0 0 0 0 0 0 0\n");
        for c in 0..4 {
            // core c is busy c/4 of the time
            let busy = tick * 25 * c;
            let idle = tick * 100 - busy;
            s.push_str(&format!("cpu{c} {busy} 0 0 {idle} 0 0 0 0 0 0\n"));
        }
        fs::write(self.root().join("stat"), s).unwrap();
    }

    fn add_process(&self, pid: u32, cmdline: &str) {
        let d = self.root().join(pid.to_string());
        fs::create_dir_all(d.join("task")).unwrap();
        fs::write(d.join("cmdline"), cmdline.replace(' ', "\0") + "\0").unwrap();
    }

    fn add_thread(&self, pid: u32, tid: u32, comm: &str, stat: RawSchedstat) {
        let d = self.root().join(format!("{pid}/task/{tid}"));
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("comm"), format!("{comm}\n")).unwrap();
        fs::write(d.join("schedstat"), format!("{stat}\n")).unwrap();
    }

    fn set_stat(&self, pid: u32, tid: u32, stat: RawSchedstat) {
        fs::write(
            self.root().join(format!("{pid}/task/{tid}/schedstat")),
            format!("{stat}\n"),
        )
        .unwrap();
    }

    fn remove_thread(&self, pid: u32, tid: u32) {
        fs::remove_dir_all(self.root().join(format!("{pid}/task/{tid}"))).unwrap();
    }

    /// Two guests with four vCPUs and two emulator threads each, plus an
    /// unrelated process.
    fn two_guests() -> Self {
        let f = FakeProc::new();
        for (pid, name) in [(100, "alpha"), (200, "beta")] {
            f.add_process(pid, &format!("qemu-system-aarch64 -name guest={name},debug-threads=on -m 4096"));
            f.add_thread(pid, pid, "qemu-system-aar", RawSchedstat::default());
            f.add_thread(pid, pid + 1, "IO iothread1", RawSchedstat::default());
            for v in 0..4 {
                f.add_thread(pid, pid + 10 + v, &format!("CPU {v}/KVM"), RawSchedstat::default());
            }
        }
        f.add_process(300, "/usr/sbin/sshd -D");
        f.add_thread(300, 300, "sshd", RawSchedstat::default());
        f
    }
}

#[test]
fn discovers_two_guests_and_classifies_threads() {
    let f = FakeProc::two_guests();
    let vms = discover_vms(&ProcFs::new(f.root()), &DiscoveryConfig::default()).unwrap();
    let ids: Vec<&str> = vms.iter().map(|v| v.vm_id.0.as_str()).collect();
    assert_eq!(ids, ["alpha", "beta"]);
    for vm in &vms {
        assert_eq!(vm.thread_count(ThreadClass::Vcpu), 4);
        assert_eq!(vm.thread_count(ThreadClass::Emulator), 2);
        assert_eq!(vm.tids(ThreadClass::Emulator), vec![vm.pid, vm.pid + 1]);
    }
}

#[test]
fn no_matching_process_yields_no_vms() {
    let f = FakeProc::new();
    f.add_process(42, "/bin/bash");
    f.add_thread(42, 42, "bash", RawSchedstat::default());
    let vms = discover_vms(&ProcFs::new(f.root()), &DiscoveryConfig::default()).unwrap();
    assert!(vms.is_empty());

    let cfg = DiscoveryConfig {
        allow: vec!["42".into()],
        ..DiscoveryConfig::default()
    };
    let vms = discover_vms(&ProcFs::new(f.root()), &cfg).unwrap();
    assert_eq!(vms.len(), 1);
    assert_eq!(vms[0].vm_id, VmId::from("42"));
}

#[test]
fn thread_listed_without_files_is_skipped() {
    let f = FakeProc::two_guests();
    // A task directory whose files are already gone, as when the thread exits
    // between readdir and open.
    fs::create_dir_all(f.root().join("100/task/150")).unwrap();
    let vms = discover_vms(&ProcFs::new(f.root()), &DiscoveryConfig::default()).unwrap();
    let alpha = &vms[0];
    assert!(alpha.thread(150).is_none());
    assert_eq!(alpha.threads().count(), 6);
}

#[test]
fn missing_procroot_is_unavailable() {
    let err = discover_vms(&ProcFs::new("/nonexistent/procroot"), &DiscoveryConfig::default()).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/procroot"), "{err}");
}

#[test]
fn collector_survives_vanishing_thread_and_keeps_counters_monotone() {
    let f = FakeProc::two_guests();
    let src = ProcFs::new(f.root());
    let mut col = Collector::discover(&src, DiscoveryConfig::default()).unwrap();

    let snap = col.snapshot(&src).unwrap();
    assert!(snap.per_core_util.is_empty());
    assert_eq!(snap.per_thread.len(), 12);

    f.set_stat(100, 101, RawSchedstat::new(400_000_000, 1_000_000, 40));
    f.set_stat(100, 110, RawSchedstat::new(900_000_000, 0, 90));
    f.write_stat(1);
    std::thread::sleep(std::time::Duration::from_millis(5));
    let snap = col.snapshot(&src).unwrap();
    assert_eq!(snap.per_core_util.len(), 4);
    assert!((snap.per_core_util[&3] - 0.75).abs() < 1e-9);

    let alpha = col.vm(&VmId::from("alpha")).unwrap();
    let emu = alpha.history(ThreadClass::Emulator).latest().unwrap().stat;
    assert_eq!(emu.cpu_time_ns, 400_000_000);
    let m = latest_vm_metrics(alpha).unwrap().unwrap();
    assert!((m.emulator_ratio - 400.0 / 1300.0).abs() < 1e-12);

    // The iothread exits; its accumulated time must not vanish from the VM total.
    f.remove_thread(100, 101);
    f.write_stat(2);
    std::thread::sleep(std::time::Duration::from_millis(5));
    col.snapshot(&src).unwrap();
    let alpha = col.vm(&VmId::from("alpha")).unwrap();
    assert_eq!(alpha.thread_count(ThreadClass::Emulator), 1);
    let emu_after = alpha.history(ThreadClass::Emulator).latest().unwrap().stat;
    assert!(emu_after.cpu_time_ns >= emu.cpu_time_ns);

    // The whole beta process exits.
    fs::remove_dir_all(f.root().join("200")).unwrap();
    f.write_stat(3);
    let snap = col.snapshot(&src).unwrap();
    assert!(!snap.gone.is_empty());
}

proptest! {
    #[test]
    fn schedstat_display_parse_round_trip(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let s = RawSchedstat::new(a, b, c);
        prop_assert_eq!(parse_schedstat(&format!("{s}\n")).unwrap(), s);
    }

    #[test]
    fn ring_keeps_newest_capacity_items(cap in 1usize..32, items in prop::collection::vec(any::<i32>(), 0..100)) {
        let mut ring = RingBuffer::new(cap);
        for (i, v) in items.iter().enumerate() {
            let evicted = ring.push(*v);
            prop_assert_eq!(evicted.is_some(), i >= cap);
            prop_assert!(ring.len() <= cap);
        }
        let expect: Vec<i32> = items.iter().rev().take(cap).rev().copied().collect();
        let got: Vec<i32> = ring.iter().copied().collect();
        prop_assert_eq!(&got, &expect);
        prop_assert_eq!(ring.latest(), items.last());
        for n in 0..expect.len() {
            prop_assert_eq!(ring.nth_back(n), expect.iter().rev().nth(n));
        }
    }

    #[test]
    fn emulator_ratio_is_scale_invariant(e in 0i64..1_000_000_000, v in 0i64..1_000_000_000, s in 1i64..1000) {
        let r = emulator_ratio(e, v).unwrap();
        let rs = emulator_ratio(e * s, v * s).unwrap();
        prop_assert!((r - rs).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn emulator_ratio_complements(e in 0i64..1_000_000_000, v in 0i64..1_000_000_000) {
        prop_assume!(e + v > 0);
        let r = emulator_ratio(e, v).unwrap();
        let q = emulator_ratio(v, e).unwrap();
        prop_assert!((r + q - 1.0).abs() < 1e-12);
    }
}
