//! Applying emulator core bindings.
//!
//! A backend receives one [`BindingRequest`] per VM and must be able to read
//! back the effective core set, since the controller reasons from its own
//! actions.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use thiserror::Error;

pub use crate::cpulist::{format_cpulist, parse_cpulist, CpulistError};
use crate::{CoreSet, Pid, Tid, VmId};

#[derive(Debug, Error)]
pub enum ActuatorError {
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid binding request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Cpulist(#[from] CpulistError),
    #[error("no binding recorded for {0}")]
    UnknownVm(VmId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingRequest {
    pub vm_id: VmId,
    pub pid: Pid,
    /// Emulator thread ids.
    pub tids: Vec<Tid>,
    pub cores: CoreSet,
}

impl BindingRequest {
    pub fn validate(&self) -> Result<(), ActuatorError> {
        if self.cores.is_empty() {
            return Err(ActuatorError::InvalidRequest(format!("{}: empty core set", self.vm_id)));
        }
        if self.tids.is_empty() {
            return Err(ActuatorError::InvalidRequest(format!("{}: no emulator threads", self.vm_id)));
        }
        Ok(())
    }
}

/// What an apply call did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyReport {
    /// Threads that exited before they could be bound; the rest were applied.
    pub vanished: Vec<Tid>,
    /// False when the backend already held exactly this binding.
    pub changed: bool,
}

pub trait ActuatorBackend {
    fn apply(&mut self, req: &BindingRequest) -> Result<ApplyReport, ActuatorError>;
    /// Currently effective emulator core set of `vm_id`.
    fn verify(&self, vm_id: &VmId) -> Result<CoreSet, ActuatorError>;
}

/// Applies a request and checks the read-back matches.
pub fn apply_binding<B: ActuatorBackend + ?Sized>(
    backend: &mut B,
    req: &BindingRequest,
) -> Result<ApplyReport, ActuatorError> {
    req.validate()?;
    let report = backend.apply(req)?;
    for tid in &report.vanished {
        warn!("{}: emulator thread {tid} vanished before binding", req.vm_id);
    }
    let effective = backend.verify(&req.vm_id)?;
    if effective != req.cores {
        return Err(ActuatorError::BackendUnavailable(format!(
            "{}: requested {} but effective set is {}",
            req.vm_id,
            format_cpulist(&req.cores)?,
            format_cpulist(&effective).unwrap_or_default()
        )));
    }
    Ok(report)
}

fn io_error(path: &Path, e: io::Error) -> ActuatorError {
    match e.kind() {
        io::ErrorKind::PermissionDenied => ActuatorError::PermissionDenied(path.display().to_string()),
        _ => ActuatorError::BackendUnavailable(format!("{}: {e}", path.display())),
    }
}

/// Which cgroup hierarchy the cpuset files live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgroupLayout {
    Unified,
    Legacy,
}

/// Writes `cpuset.cpus` of a per-VM `emulator` child group, as laid out by
/// libvirt. The slice path comes from a template in which `{vm}` is replaced
/// by the VM id and `{pid}` by the QEMU pid.
#[derive(Debug, Clone)]
pub struct CgroupBackend {
    root: PathBuf,
    layout: CgroupLayout,
    slice_template: String,
    proc_root: PathBuf,
    slices: BTreeMap<VmId, PathBuf>,
}

pub const DEFAULT_SLICE_TEMPLATE: &str = "machine.slice/machine-qemu-{vm}.scope";

impl CgroupBackend {
    /// Detects the hierarchy: unified when `<root>/cgroup.controllers`
    /// exists, otherwise the legacy `<root>/cpuset` mount.
    pub fn new(root: impl Into<PathBuf>, slice_template: &str, proc_root: impl Into<PathBuf>) -> Result<Self, ActuatorError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(ActuatorError::BackendUnavailable(format!("{} is not a directory", root.display())));
        }
        let layout = if root.join("cgroup.controllers").exists() {
            CgroupLayout::Unified
        } else if root.join("cpuset").is_dir() {
            CgroupLayout::Legacy
        } else {
            return Err(ActuatorError::BackendUnavailable(format!(
                "{}: neither cgroup.controllers nor cpuset/ found",
                root.display()
            )));
        };
        Ok(CgroupBackend {
            root,
            layout,
            slice_template: slice_template.to_string(),
            proc_root: proc_root.into(),
            slices: BTreeMap::new(),
        })
    }

    pub fn layout(&self) -> CgroupLayout {
        self.layout
    }

    fn hierarchy(&self) -> PathBuf {
        match self.layout {
            CgroupLayout::Unified => self.root.clone(),
            CgroupLayout::Legacy => self.root.join("cpuset"),
        }
    }

    /// Path of the `cpuset.cpus` file for a VM.
    pub fn cpus_path(&self, vm_id: &VmId, pid: Pid) -> PathBuf {
        let slice = self
            .slice_template
            .replace("{vm}", vm_id.as_str())
            .replace("{pid}", &pid.to_string());
        self.hierarchy().join(slice).join("emulator").join("cpuset.cpus")
    }
}

impl ActuatorBackend for CgroupBackend {
    fn apply(&mut self, req: &BindingRequest) -> Result<ApplyReport, ActuatorError> {
        let path = self.cpus_path(&req.vm_id, req.pid);
        let text = format!("{}\n", format_cpulist(&req.cores)?);
        let vanished = req
            .tids
            .iter()
            .copied()
            .filter(|tid| {
                !self
                    .proc_root
                    .join(req.pid.to_string())
                    .join("task")
                    .join(tid.to_string())
                    .exists()
            })
            .collect();
        let current = fs::read_to_string(&path).ok();
        let changed = current.as_deref() != Some(text.as_str());
        if changed {
            debug!("writing {} to {}", text.trim_end(), path.display());
            fs::write(&path, &text).map_err(|e| io_error(&path, e))?;
        }
        self.slices.insert(req.vm_id.clone(), path);
        Ok(ApplyReport { vanished, changed })
    }

    fn verify(&self, vm_id: &VmId) -> Result<CoreSet, ActuatorError> {
        let path = self
            .slices
            .get(vm_id)
            .ok_or_else(|| ActuatorError::UnknownVm(vm_id.clone()))?;
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Ok(parse_cpulist(text.trim())?)
    }
}

/// Sets per-thread scheduling affinity directly.
#[derive(Debug, Clone, Default)]
pub struct AffinityBackend {
    bound: BTreeMap<VmId, Vec<Tid>>,
}

impl AffinityBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

#[cfg(target_os = "linux")]
mod affinity {
    use super::*;

    pub(super) fn set(tid: Tid, cores: &CoreSet) -> io::Result<()> {
        // SAFETY: cpu_set_t is plain data; CPU_SET only touches indices we bound-check.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_ZERO(&mut set);
            for &c in cores {
                if (c as usize) >= libc::CPU_SETSIZE as usize {
                    return Err(io::Error::from_raw_os_error(libc::EINVAL));
                }
                libc::CPU_SET(c as usize, &mut set);
            }
            if libc::sched_setaffinity(tid as libc::pid_t, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                return Err(io::Error::last_os_error());
            }
        }
        Ok(())
    }

    pub(super) fn get(tid: Tid) -> io::Result<CoreSet> {
        // SAFETY: as above.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            if libc::sched_getaffinity(tid as libc::pid_t, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
                return Err(io::Error::last_os_error());
            }
            Ok((0..libc::CPU_SETSIZE as usize)
                .filter(|&c| libc::CPU_ISSET(c, &set))
                .map(|c| c as u32)
                .collect())
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod affinity {
    use super::*;

    pub(super) fn set(_: Tid, _: &CoreSet) -> io::Result<()> {
        Err(io::Error::new(io::ErrorKind::Unsupported, "thread affinity needs Linux"))
    }

    pub(super) fn get(_: Tid) -> io::Result<CoreSet> {
        Err(io::Error::new(io::ErrorKind::Unsupported, "thread affinity needs Linux"))
    }
}

fn is_vanished(e: &io::Error) -> bool {
    e.raw_os_error() == Some(libc::ESRCH)
}

impl ActuatorBackend for AffinityBackend {
    fn apply(&mut self, req: &BindingRequest) -> Result<ApplyReport, ActuatorError> {
        let mut vanished = Vec::new();
        let mut live = Vec::new();
        let mut changed = false;
        for &tid in &req.tids {
            match affinity::get(tid) {
                Ok(cur) if cur == req.cores => {
                    live.push(tid);
                    continue;
                }
                Err(e) if is_vanished(&e) => {
                    vanished.push(tid);
                    continue;
                }
                _ => {}
            }
            match affinity::set(tid, &req.cores) {
                Ok(()) => {
                    changed = true;
                    live.push(tid);
                }
                Err(e) if is_vanished(&e) => vanished.push(tid),
                Err(e) if e.kind() == io::ErrorKind::PermissionDenied => {
                    return Err(ActuatorError::PermissionDenied(format!("sched_setaffinity({tid})")))
                }
                Err(e) => return Err(ActuatorError::BackendUnavailable(format!("sched_setaffinity({tid}): {e}"))),
            }
        }
        self.bound.insert(req.vm_id.clone(), live);
        Ok(ApplyReport { vanished, changed })
    }

    /// The intersection of the live threads' masks; an empty set when the
    /// threads disagree.
    fn verify(&self, vm_id: &VmId) -> Result<CoreSet, ActuatorError> {
        let tids = self.bound.get(vm_id).ok_or_else(|| ActuatorError::UnknownVm(vm_id.clone()))?;
        let mut effective: Option<CoreSet> = None;
        for &tid in tids {
            let set = match affinity::get(tid) {
                Ok(s) => s,
                Err(e) if is_vanished(&e) => continue,
                Err(e) => return Err(ActuatorError::BackendUnavailable(format!("sched_getaffinity({tid}): {e}"))),
            };
            effective = Some(match effective {
                None => set,
                Some(prev) if prev == set => prev,
                Some(_) => CoreSet::new(),
            });
        }
        Ok(effective.unwrap_or_default())
    }
}

/// Remembers requests without touching the host. Backs dry runs and replay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordingBackend {
    current: BTreeMap<VmId, CoreSet>,
    pub applied: Vec<BindingRequest>,
}

impl RecordingBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> &BTreeMap<VmId, CoreSet> {
        &self.current
    }
}

impl ActuatorBackend for RecordingBackend {
    fn apply(&mut self, req: &BindingRequest) -> Result<ApplyReport, ActuatorError> {
        let changed = self.current.get(&req.vm_id) != Some(&req.cores);
        if changed {
            self.current.insert(req.vm_id.clone(), req.cores.clone());
            self.applied.push(req.clone());
        }
        Ok(ApplyReport {
            vanished: Vec::new(),
            changed,
        })
    }

    fn verify(&self, vm_id: &VmId) -> Result<CoreSet, ActuatorError> {
        self.current.get(vm_id).cloned().ok_or_else(|| ActuatorError::UnknownVm(vm_id.clone()))
    }
}
