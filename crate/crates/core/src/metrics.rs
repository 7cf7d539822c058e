//! Derived quantities: emulator ratio, run-delay rates, utilization disparity
//! and the relative-change anomaly test used while the controller is stable.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::telemetry::{ClassSample, VmRecord};
use crate::{CoreId, ThreadClass};

const NS_PER_SEC: f64 = 1e9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("negative delta")]
    NegativeDelta,
    #[error("zero-length window")]
    ZeroWindow,
    #[error("utilization {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("empty window")]
    EmptyWindow,
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
}

/// Emulator CPU time over total (emulator + vCPU) CPU time of one VM, both
/// measured as deltas over the same window. An idle VM has ratio 0.
pub fn emulator_ratio(emu_cputime_delta: i64, vcpu_cputime_delta: i64) -> Result<f64, MetricsError> {
    if emu_cputime_delta < 0 || vcpu_cputime_delta < 0 {
        return Err(MetricsError::NegativeDelta);
    }
    let total = emu_cputime_delta as f64 + vcpu_cputime_delta as f64;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(emu_cputime_delta as f64 / total)
}

/// Run delay accumulated over `wall_delta` scaled to ns per second.
pub fn run_delay_rate(delay_delta: i64, wall_delta: i64) -> Result<f64, MetricsError> {
    if wall_delta == 0 {
        return Err(MetricsError::ZeroWindow);
    }
    if delay_delta < 0 || wall_delta < 0 {
        return Err(MetricsError::NegativeDelta);
    }
    Ok(delay_delta as f64 * NS_PER_SEC / wall_delta as f64)
}

/// Max minus min of the per-core utilizations; 0 with fewer than two cores.
pub fn utilization_disparity(per_core_util: &BTreeMap<CoreId, f64>) -> Result<f64, MetricsError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &u in per_core_util.values() {
        if !(0.0..=1.0).contains(&u) {
            return Err(MetricsError::OutOfRange(u));
        }
        lo = lo.min(u);
        hi = hi.max(u);
    }
    if per_core_util.len() < 2 {
        return Ok(0.0);
    }
    Ok(hi - lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    /// |current - mean| / max(mean, floor)
    pub magnitude: f64,
}

impl StabilityVerdict {
    pub fn is_anomalous(&self) -> bool {
        self.verdict == Verdict::Anomalous
    }
}

/// Flags `current` as anomalous when its relative distance from the window
/// mean strictly exceeds `threshold`. `floor` bounds the denominator from
/// below so an all-zero window does not divide by zero.
pub fn stability_check(
    window: &[f64],
    current: f64,
    threshold: f64,
    floor: f64,
) -> Result<StabilityVerdict, MetricsError> {
    if window.is_empty() {
        return Err(MetricsError::EmptyWindow);
    }
    if !(threshold > 0.0) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    let magnitude = (current - mean).abs() / mean.abs().max(floor);
    let verdict = if magnitude > threshold {
        Verdict::Anomalous
    } else {
        Verdict::Normal
    };
    Ok(StabilityVerdict { verdict, magnitude })
}

/// Relative-change thresholds and absolute floors per metric family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityThresholds {
    pub delay_threshold: f64,
    /// ns of run delay per second.
    pub delay_floor: f64,
    pub util_threshold: f64,
    pub util_floor: f64,
}

impl Default for StabilityThresholds {
    fn default() -> Self {
        StabilityThresholds {
            delay_threshold: 0.3,
            delay_floor: 1000.0,
            util_threshold: 0.15,
            util_floor: 0.01,
        }
    }
}

/// Per-VM view of one sampling window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VmMetrics {
    pub emulator_ratio: f64,
    /// Summed over the VM's emulator threads, ns per second.
    pub emu_run_delay_rate: f64,
    /// Summed over the VM's vCPU threads, ns per second.
    pub vcpu_run_delay_rate: f64,
    /// Emulator CPU time per wall second (core equivalents).
    pub emu_cpu_util: f64,
    /// vCPU CPU time per wall second per vCPU thread.
    pub vcpu_cpu_util: f64,
}

impl VmMetrics {
    /// All fields finite and within their domains.
    pub fn is_well_formed(&self) -> bool {
        let vals = [
            self.emulator_ratio,
            self.emu_run_delay_rate,
            self.vcpu_run_delay_rate,
            self.emu_cpu_util,
            self.vcpu_cpu_util,
        ];
        vals.iter().all(|v| v.is_finite() && *v >= 0.0) && self.emulator_ratio <= 1.0
    }
}

/// Computes [`VmMetrics`] between two aggregated samples of each class.
pub fn window_metrics(
    emu: (&ClassSample, &ClassSample),
    vcpu: (&ClassSample, &ClassSample),
) -> Result<VmMetrics, MetricsError> {
    let wall = vcpu.1.timestamp_ns as i64 - vcpu.0.timestamp_ns as i64;
    if wall == 0 {
        return Err(MetricsError::ZeroWindow);
    }
    let delta = |a: u64, b: u64| b as i64 - a as i64;
    let emu_cpu = delta(emu.0.stat.cpu_time_ns, emu.1.stat.cpu_time_ns);
    let vcpu_cpu = delta(vcpu.0.stat.cpu_time_ns, vcpu.1.stat.cpu_time_ns);
    let emu_delay = delta(emu.0.stat.run_delay_ns, emu.1.stat.run_delay_ns);
    let vcpu_delay = delta(vcpu.0.stat.run_delay_ns, vcpu.1.stat.run_delay_ns);
    let wall_s = wall as f64 / NS_PER_SEC;
    let vcpus = vcpu.1.threads.max(1) as f64;
    Ok(VmMetrics {
        emulator_ratio: emulator_ratio(emu_cpu, vcpu_cpu)?,
        emu_run_delay_rate: run_delay_rate(emu_delay, wall)?,
        vcpu_run_delay_rate: run_delay_rate(vcpu_delay, wall)?,
        emu_cpu_util: emu_cpu as f64 / NS_PER_SEC / wall_s,
        vcpu_cpu_util: vcpu_cpu as f64 / NS_PER_SEC / wall_s / vcpus,
    })
}

/// Metrics over the newest window of a VM's history; `None` until two samples
/// exist.
pub fn latest_vm_metrics(vm: &VmRecord) -> Option<Result<VmMetrics, MetricsError>> {
    let emu = vm.history(ThreadClass::Emulator);
    let vcpu = vm.history(ThreadClass::Vcpu);
    let (e0, e1) = (emu.nth_back(1)?, emu.nth_back(0)?);
    let (v0, v1) = (vcpu.nth_back(1)?, vcpu.nth_back(0)?);
    Some(window_metrics((e0, e1), (v0, v1)))
}

/// System-level view handed to the controller alongside per-VM metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SystemMetrics {
    pub disparity: f64,
    pub mean_util: f64,
}

impl SystemMetrics {
    pub fn from_core_util(per_core_util: &BTreeMap<CoreId, f64>) -> Result<Self, MetricsError> {
        let disparity = utilization_disparity(per_core_util)?;
        let mean_util = if per_core_util.is_empty() {
            0.0
        } else {
            per_core_util.values().sum::<f64>() / per_core_util.len() as f64
        };
        Ok(SystemMetrics {
            disparity,
            mean_util,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(emulator_ratio(200_000_000, 600_000_000).unwrap(), 0.25);
        assert_eq!(emulator_ratio(0, 500_000_000).unwrap(), 0.0);
        assert_eq!(emulator_ratio(0, 0).unwrap(), 0.0);
        assert_eq!(emulator_ratio(-1, 5), Err(MetricsError::NegativeDelta));
    }

    #[test]
    fn delay_rate_examples() {
        assert_eq!(run_delay_rate(500_000, 1_000_000_000).unwrap(), 500_000.0);
        assert_eq!(run_delay_rate(500_000, 2_000_000_000).unwrap(), 250_000.0);
        assert_eq!(run_delay_rate(0, 1_000_000_000).unwrap(), 0.0);
        assert_eq!(run_delay_rate(1, 0), Err(MetricsError::ZeroWindow));
    }

    #[test]
    fn disparity_examples() {
        let d = utilization_disparity(&BTreeMap::from([(0, 0.9), (1, 0.5)])).unwrap();
        assert!((d - 0.4).abs() < 1e-12);
        assert_eq!(
            utilization_disparity(&BTreeMap::from([(0, 0.7), (1, 0.7), (2, 0.7)])).unwrap(),
            0.0
        );
        assert_eq!(utilization_disparity(&BTreeMap::from([(0, 0.6)])).unwrap(), 0.0);
        assert_eq!(
            utilization_disparity(&BTreeMap::from([(0, 1.2), (1, 0.1)])),
            Err(MetricsError::OutOfRange(1.2))
        );
    }

    #[test]
    fn stability_examples() {
        let v = stability_check(&[100.0], 150.0, 0.2, 1000.0 / 1e9).unwrap();
        assert!(v.is_anomalous());
        assert!((v.magnitude - 0.5).abs() < 1e-12);
        assert!(!stability_check(&[90.0, 110.0], 110.0, 0.2, 1e-6).unwrap().is_anomalous());
        assert!(!stability_check(&[0.0, 0.0], 0.0, 0.3, 1000.0).unwrap().is_anomalous());
        assert_eq!(stability_check(&[], 1.0, 0.2, 1.0), Err(MetricsError::EmptyWindow));
        assert!(stability_check(&[1.0], 1.0, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn ratio_complement(a in 0i64..1_000_000_000_000, b in 0i64..1_000_000_000_000) {
            prop_assume!(a + b > 0);
            let s = emulator_ratio(a, b).unwrap() + emulator_ratio(b, a).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ratio_scale_invariant(a in 0i64..1_000_000, b in 0i64..1_000_000, k in 1i64..1_000_000) {
            let r1 = emulator_ratio(a, b).unwrap();
            let r2 = emulator_ratio(a * k, b * k).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r1));
        }

        #[test]
        fn disparity_permutation_invariant(vals in proptest::collection::vec(0.0f64..=1.0, 0..16), rot in 0usize..16) {
            let m: BTreeMap<CoreId, f64> = vals.iter().enumerate().map(|(i, v)| (i as CoreId, *v)).collect();
            let n = vals.len().max(1);
            let p: BTreeMap<CoreId, f64> = vals.iter().enumerate().map(|(i, v)| (((i + rot) % n) as CoreId, *v)).collect();
            let d = utilization_disparity(&m).unwrap();
            prop_assert_eq!(d, utilization_disparity(&p).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn verdict_monotone_in_deviation(
            window in proptest::collection::vec(0.0f64..1e6, 1..20),
            dev in 0.0f64..1e6,
            extra in 0.0f64..1e6,
            threshold in 0.01f64..2.0,
        ) {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            let a = stability_check(&window, mean + dev, threshold, 1000.0).unwrap();
            let b = stability_check(&window, mean + dev + extra, threshold, 1000.0).unwrap();
            prop_assert!(!(a.is_anomalous() && !b.is_anomalous()));
        }
    }
}
