//! Recorded telemetry as CSV, one row per thread or core per collection pass:
//!
//! ```text
//! timestamp_ns,kind,vm_id,id,class,cpu_time_ns,run_delay_ns,timeslices,util
//! 1000000000,thread,web,4242,emulator,81000000,120000,95,
//! 1000000000,core,,3,,,,,0.42
//! ```
//!
//! Thread rows carry cumulative schedstat counters; core rows the utilization
//! of the preceding interval. Rows sharing a timestamp form one snapshot and
//! timestamps never decrease.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use anyhow::{bail, Context, Result};
use emuctl_core::telemetry::{RawSchedstat, TelemetrySnapshot, ThreadInfo, VmRecord};
use emuctl_core::{CoreId, ThreadClass, Tid, VmId};

pub const SNAPSHOT_HEADER: [&str; 9] = [
    "timestamp_ns",
    "kind",
    "vm_id",
    "id",
    "class",
    "cpu_time_ns",
    "run_delay_ns",
    "timeslices",
    "util",
];

/// A parsed recording: the snapshots in order plus thread membership per VM.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recording {
    pub snapshots: Vec<TelemetrySnapshot>,
    pub threads: BTreeMap<VmId, BTreeMap<Tid, ThreadClass>>,
}

impl Recording {
    /// VM records for a collector; the pid is taken as the smallest tid, which
    /// is the main thread for QEMU.
    pub fn vm_records(&self, ring_capacity: usize) -> Vec<VmRecord> {
        self.threads
            .iter()
            .map(|(vm, threads)| {
                let pid = threads.keys().next().copied().unwrap_or(0);
                let infos = threads.iter().map(|(tid, class)| ThreadInfo {
                    tid: *tid,
                    name: class.as_str().to_string(),
                    class: *class,
                });
                VmRecord::new(vm.clone(), pid, infos, ring_capacity)
            })
            .collect()
    }
}

pub struct SnapshotWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> SnapshotWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(SNAPSHOT_HEADER)?;
        Ok(SnapshotWriter { out })
    }

    /// Writes one snapshot; threads are attributed through `vms`.
    pub fn write(&mut self, snap: &TelemetrySnapshot, vms: &[VmRecord]) -> Result<()> {
        let ts = snap.timestamp_ns.to_string();
        for vm in vms {
            for t in vm.threads() {
                let Some(s) = snap.per_thread.get(&t.tid) else {
                    continue;
                };
                self.out.write_record([
                    ts.as_str(),
                    "thread",
                    vm.vm_id.as_str(),
                    &t.tid.to_string(),
                    t.class.as_str(),
                    &s.cpu_time_ns.to_string(),
                    &s.run_delay_ns.to_string(),
                    &s.timeslices.to_string(),
                    "",
                ])?;
            }
        }
        for (core, util) in &snap.per_core_util {
            self.out
                .write_record([ts.as_str(), "core", "", &core.to_string(), "", "", "", "", &util.to_string()])?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize) -> &'a str {
    rec.get(i).unwrap_or("").trim()
}

fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: u64) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = field(rec, i);
    v.parse::<T>()
        .map_err(|e| anyhow::anyhow!("row {row}: column {} = {v:?}: {e}", SNAPSHOT_HEADER[i]))
}

/// Parses a recording. Errors name the 1-based line of the offending row.
pub fn read_recording<R: Read>(input: R) -> Result<Recording> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = rdr.headers().context("row 1: cannot read header")?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != SNAPSHOT_HEADER {
        bail!("row 1: expected header {:?}, found {:?}", SNAPSHOT_HEADER.join(","), names.join(","));
    }
    let mut rec = Recording::default();
    let mut cur: Option<TelemetrySnapshot> = None;
    for (i, r) in rdr.records().enumerate() {
        let row = i as u64 + 2;
        let r = r.with_context(|| format!("row {row}"))?;
        if r.len() != SNAPSHOT_HEADER.len() {
            bail!("row {row}: expected {} columns, found {}", SNAPSHOT_HEADER.len(), r.len());
        }
        let ts: u64 = num(&r, 0, row)?;
        match &cur {
            Some(s) if ts < s.timestamp_ns => bail!("row {row}: timestamp {ts} goes backwards"),
            Some(s) if ts == s.timestamp_ns => {}
            _ => {
                if let Some(done) = cur.take() {
                    rec.snapshots.push(done);
                }
                cur = Some(TelemetrySnapshot {
                    timestamp_ns: ts,
                    ..TelemetrySnapshot::default()
                });
            }
        }
        let snap = cur.as_mut().expect("set above");
        match field(&r, 1) {
            "thread" => {
                let vm = field(&r, 2);
                if vm.is_empty() {
                    bail!("row {row}: thread row without vm_id");
                }
                let tid: Tid = num(&r, 3, row)?;
                let class = ThreadClass::parse(field(&r, 4))
                    .with_context(|| format!("row {row}: class must be vcpu or emulator"))?;
                let stat = RawSchedstat::new(num(&r, 5, row)?, num(&r, 6, row)?, num(&r, 7, row)?);
                let owner = VmId::from(vm);
                if let Some((other, _)) = rec
                    .threads
                    .iter()
                    .find(|(id, t)| **id != owner && t.contains_key(&tid))
                {
                    bail!("row {row}: tid {tid} already belongs to {other}");
                }
                rec.threads.entry(owner).or_default().insert(tid, class);
                snap.per_thread.insert(tid, stat);
            }
            "core" => {
                let core: CoreId = num(&r, 3, row)?;
                let util: f64 = num(&r, 8, row)?;
                if !(0.0..=1.0).contains(&util) {
                    bail!("row {row}: util {util} outside [0, 1]");
                }
                snap.per_core_util.insert(core, util);
            }
            other => bail!("row {row}: kind must be thread or core, found {other:?}"),
        }
    }
    if let Some(done) = cur {
        rec.snapshots.push(done);
    }
    Ok(rec)
}
