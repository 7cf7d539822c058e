//! One control step: collect, derive metrics, tick the controller and turn its
//! actions into binding requests. Shared by the daemon, the simulator and
//! replay.

use std::collections::BTreeMap;

use log::warn;

use crate::actuator::{apply_binding, ActuatorBackend, ActuatorError, ApplyReport, BindingRequest};
use crate::controller::{Action, Controller, StateName, TickInput};
use crate::metrics::{latest_vm_metrics, SystemMetrics};
use crate::telemetry::{Collector, TelemetryError, TelemetrySnapshot, TelemetrySource};
use crate::VmId;

/// What one step produced.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub timestamp_ns: u64,
    /// Controller state before the tick.
    pub state: StateName,
    pub input: TickInput,
    pub actions: Vec<Action>,
}

pub struct ControlLoop {
    collector: Collector,
    controller: Controller,
}

impl ControlLoop {
    pub fn new(collector: Collector, controller: Controller) -> Self {
        ControlLoop { collector, controller }
    }

    pub fn collector(&self) -> &Collector {
        &self.collector
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn controller_mut(&mut self) -> &mut Controller {
        &mut self.controller
    }

    /// Metrics of every VM with at least two samples, plus the system view
    /// of the newest collection pass.
    pub fn tick_input(&self) -> TickInput {
        let mut vms = BTreeMap::new();
        for vm in self.collector.vms() {
            match latest_vm_metrics(vm) {
                Some(Ok(m)) => {
                    vms.insert(vm.vm_id.clone(), m);
                }
                Some(Err(e)) => warn!("{}: {e}", vm.vm_id),
                None => {}
            }
        }
        let core_util = self
            .collector
            .system_history()
            .latest()
            .map(|s| s.per_core_util.clone())
            .unwrap_or_default();
        let system = SystemMetrics::from_core_util(&core_util).unwrap_or_else(|e| {
            warn!("system metrics: {e}");
            SystemMetrics {
                disparity: f64::NAN,
                mean_util: f64::NAN,
            }
        });
        TickInput { vms, system, core_util }
    }

    fn tick(&mut self, timestamp_ns: u64) -> StepRecord {
        let input = self.tick_input();
        let state = self.controller.state_name();
        let actions = self.controller.tick(&input);
        StepRecord {
            timestamp_ns,
            state,
            input,
            actions,
        }
    }

    /// Collects from a live source and ticks.
    pub fn step<S: TelemetrySource + ?Sized>(&mut self, source: &S) -> Result<(TelemetrySnapshot, StepRecord), TelemetryError> {
        let snap = self.collector.snapshot(source)?;
        let rec = self.tick(snap.timestamp_ns);
        Ok((snap, rec))
    }

    /// Ticks on a recorded snapshot.
    pub fn step_recorded(&mut self, snap: &TelemetrySnapshot) -> StepRecord {
        self.collector.ingest(snap);
        self.tick(snap.timestamp_ns)
    }

    /// Binding requests for `actions`; VMs without emulator threads are skipped.
    pub fn requests(&self, actions: &[Action]) -> Vec<BindingRequest> {
        let mut out = Vec::new();
        for a in actions {
            let Action::Bind { vm, class, cores } = a else {
                continue;
            };
            let Some(rec) = self.collector.vm(vm) else {
                warn!("bind for unknown vm {vm}");
                continue;
            };
            let tids = rec.tids(*class);
            if tids.is_empty() {
                warn!("{vm}: no {} threads to bind", class.as_str());
                continue;
            }
            out.push(BindingRequest {
                vm_id: vm.clone(),
                pid: rec.pid,
                tids,
                cores: cores.clone(),
            });
        }
        out
    }

    /// Applies `actions` through `backend`, one request at a time.
    pub fn apply<B: ActuatorBackend + ?Sized>(
        &self,
        backend: &mut B,
        actions: &[Action],
    ) -> Vec<(VmId, Result<ApplyReport, ActuatorError>)> {
        self.requests(actions)
            .into_iter()
            .map(|req| {
                let r = apply_binding(backend, &req);
                (req.vm_id, r)
            })
            .collect()
    }
}
