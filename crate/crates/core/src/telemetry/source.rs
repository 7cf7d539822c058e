use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::{CoreId, Pid, Tid};

#[derive(Debug, Error)]
pub enum SourceError {
    /// The entry disappeared (process or thread exited).
    #[error("entry gone: {0}")]
    Gone(String),
    #[error("telemetry source unavailable: {0}")]
    Unavailable(String),
}

/// Read access to proc-style text. Every method returns the raw file text so
/// that alternative sources (fixtures, the simulator) go through the same
/// parsers as the live host.
pub trait TelemetrySource {
    fn processes(&self) -> Result<Vec<Pid>, SourceError>;
    /// Command line with the NUL separators replaced by spaces.
    fn cmdline(&self, pid: Pid) -> Result<String, SourceError>;
    fn tasks(&self, pid: Pid) -> Result<Vec<Tid>, SourceError>;
    fn comm(&self, pid: Pid, tid: Tid) -> Result<String, SourceError>;
    fn schedstat(&self, pid: Pid, tid: Tid) -> Result<String, SourceError>;
    /// Contents of `<procroot>/stat`.
    fn stat(&self) -> Result<String, SourceError>;
    /// Monotonic timestamp of the current collection pass.
    fn now_ns(&self) -> u64;
}

/// A `/proc`-layout directory tree; `/proc` itself by default.
#[derive(Debug)]
pub struct ProcFs {
    root: PathBuf,
    epoch: Instant,
}

impl ProcFs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ProcFs {
            root: root.into(),
            epoch: Instant::now(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read(&self, rel: &str, per_entry: bool) -> Result<String, SourceError> {
        let path = self.root.join(rel);
        fs::read_to_string(&path).map_err(|e| map_io(e, &path, per_entry))
    }

    fn numeric_entries(&self, dir: &Path, per_entry: bool) -> Result<Vec<u32>, SourceError> {
        let rd = fs::read_dir(dir).map_err(|e| map_io(e, dir, per_entry))?;
        let mut ids: Vec<u32> = rd
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|s| s.parse().ok()))
            .collect();
        ids.sort_unstable();
        Ok(ids)
    }
}

impl Default for ProcFs {
    fn default() -> Self {
        ProcFs::new("/proc")
    }
}

fn map_io(e: io::Error, path: &Path, per_entry: bool) -> SourceError {
    // ESRCH surfaces when a task exits between readdir and open.
    let gone = e.kind() == io::ErrorKind::NotFound || e.raw_os_error() == Some(libc::ESRCH);
    if per_entry && gone {
        SourceError::Gone(path.display().to_string())
    } else {
        SourceError::Unavailable(format!("{}: {e}", path.display()))
    }
}

impl TelemetrySource for ProcFs {
    fn processes(&self) -> Result<Vec<Pid>, SourceError> {
        self.numeric_entries(&self.root, false)
    }

    fn cmdline(&self, pid: Pid) -> Result<String, SourceError> {
        let path = self.root.join(pid.to_string()).join("cmdline");
        let raw = fs::read(&path).map_err(|e| map_io(e, &path, true))?;
        let text = String::from_utf8_lossy(&raw);
        Ok(text
            .split('\0')
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" "))
    }

    fn tasks(&self, pid: Pid) -> Result<Vec<Tid>, SourceError> {
        let dir = self.root.join(pid.to_string()).join("task");
        self.numeric_entries(&dir, true)
    }

    fn comm(&self, pid: Pid, tid: Tid) -> Result<String, SourceError> {
        self.read(&format!("{pid}/task/{tid}/comm"), true)
            .map(|s| s.trim_end_matches('\n').to_string())
    }

    fn schedstat(&self, pid: Pid, tid: Tid) -> Result<String, SourceError> {
        self.read(&format!("{pid}/task/{tid}/schedstat"), true)
    }

    fn stat(&self) -> Result<String, SourceError> {
        self.read("stat", false)
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }
}

/// Idle and total jiffies of one `cpu<N>` line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CpuTimes {
    pub idle: u64,
    pub total: u64,
}

/// Parses the per-core `cpu<N>` lines of `/proc/stat`.
///
/// Columns after the label are user, nice, system, idle, iowait, irq,
/// softirq, steal, guest, guest_nice. Idle time is idle + iowait; the total is
/// the sum of the first eight columns (guest time is already part of user).
pub fn parse_proc_stat(text: &str) -> Result<BTreeMap<CoreId, CpuTimes>, super::TelemetryError> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let mut fields = line.split_whitespace();
        let Some(label) = fields.next() else { continue };
        let Some(num) = label.strip_prefix("cpu") else {
            continue;
        };
        if num.is_empty() {
            continue;
        }
        let core: CoreId = num
            .parse()
            .map_err(|_| super::TelemetryError::MalformedStat(line.to_string()))?;
        let cols: Vec<u64> = fields
            .map(|f| f.parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|_| super::TelemetryError::MalformedStat(line.to_string()))?;
        if cols.len() < 4 {
            return Err(super::TelemetryError::MalformedStat(line.to_string()));
        }
        let idle = cols[3] + cols.get(4).copied().unwrap_or(0);
        let total = cols.iter().take(8).sum();
        out.insert(core, CpuTimes { idle, total });
    }
    Ok(out)
}

/// `1 - idle_delta / total_delta` per core present in both readings.
/// Cores whose counters did not advance or went backwards are omitted.
pub fn core_utilization(
    prev: &BTreeMap<CoreId, CpuTimes>,
    cur: &BTreeMap<CoreId, CpuTimes>,
) -> BTreeMap<CoreId, f64> {
    let mut out = BTreeMap::new();
    for (core, now) in cur {
        let Some(before) = prev.get(core) else { continue };
        if now.total <= before.total || now.idle < before.idle {
            continue;
        }
        let total = (now.total - before.total) as f64;
        let idle = (now.idle - before.idle) as f64;
        out.insert(*core, (1.0 - idle / total).clamp(0.0, 1.0));
    }
    out
}
