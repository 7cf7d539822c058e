//! Static emulator-binding strategies and their equivalence classes.
//!
//! A strategy assigns each of `x` VMs a subset of the host's cores. Two
//! strategies are equivalent when one becomes the other by relabelling cores
//! within the small set and within the big set; VMs keep their identity. Each
//! class is captured by a [`CanonicalSignature`]: for every core type and every
//! subset of VMs, how many cores of that type are shared by exactly that subset.
//! Counting those tables per type is a stars-and-bars problem (distribute `n`
//! identical cores over `2^x` VM subsets), which gives the closed form
//! `C(2^x + n - 1, n) * C(2^x + m - 1, m)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::{CoreId, CoreSet, CoreType};

/// Upper bound on `(2^x)^(n+m)` raw labelings accepted by [`enumerate_strategies`].
pub const DEFAULT_ENUMERATION_CAP: u128 = 1 << 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StrategyError {
    #[error("core {0} is not part of the topology")]
    UnknownCore(CoreId),
    #[error("core {0} listed as both small and big")]
    OverlappingCore(CoreId),
    #[error("result exceeds 128-bit range")]
    Overflow,
    #[error("strategy space too large: {labelings} labelings exceeds cap {cap}")]
    SpaceTooLarge { labelings: String, cap: u128 },
    #[error("VM count {0} unsupported (need 1..=16)")]
    VmCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreTopology {
    small: CoreSet,
    big: CoreSet,
}

impl CoreTopology {
    pub fn new(small: CoreSet, big: CoreSet) -> Result<Self, StrategyError> {
        if let Some(c) = small.intersection(&big).next() {
            return Err(StrategyError::OverlappingCore(*c));
        }
        Ok(CoreTopology { small, big })
    }

    /// `n` small cores numbered `0..n`, then `m` big cores.
    pub fn sequential(n: usize, m: usize) -> Self {
        let small = (0..n as CoreId).collect();
        let big = (n as CoreId..(n + m) as CoreId).collect();
        CoreTopology { small, big }
    }

    pub fn small(&self) -> &CoreSet {
        &self.small
    }

    pub fn big(&self) -> &CoreSet {
        &self.big
    }

    pub fn all(&self) -> CoreSet {
        self.small.union(&self.big).copied().collect()
    }

    pub fn core_type(&self, core: CoreId) -> Option<CoreType> {
        if self.small.contains(&core) {
            Some(CoreType::Small)
        } else if self.big.contains(&core) {
            Some(CoreType::Big)
        } else {
            None
        }
    }

    pub fn is_empty(&self) -> bool {
        self.small.is_empty() && self.big.is_empty()
    }
}

/// Per-VM emulator core subsets; index `i` is VM `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Strategy {
    pub per_vm: Vec<CoreSet>,
}

impl Strategy {
    pub fn new(per_vm: Vec<CoreSet>) -> Self {
        Strategy { per_vm }
    }

    pub fn vm_count(&self) -> usize {
        self.per_vm.len()
    }
}

/// Bitmask over VM indices: bit `i` set means VM `i + 1` uses the core.
pub type VmMask = u32;

/// Count table `(core type, VM subset) -> cores`; zero entries are omitted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct CanonicalSignature {
    counts: BTreeMap<(CoreType, VmMask), usize>,
}

impl CanonicalSignature {
    pub fn count(&self, ty: CoreType, mask: VmMask) -> usize {
        self.counts.get(&(ty, mask)).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (CoreType, VmMask, usize)> + '_ {
        self.counts.iter().map(|(&(t, m), &c)| (t, m, c))
    }

    /// Number of cores of `ty` accounted for.
    pub fn total(&self, ty: CoreType) -> usize {
        self.entries().filter(|e| e.0 == ty).map(|e| e.2).sum()
    }

    /// `|Y_i|` for VM `i` (zero-based).
    pub fn vm_size(&self, vm: usize) -> usize {
        self.entries()
            .filter(|(_, mask, _)| mask & (1 << vm) != 0)
            .map(|e| e.2)
            .sum()
    }

    fn bump(&mut self, ty: CoreType, mask: VmMask, by: usize) {
        if by > 0 {
            *self.counts.entry((ty, mask)).or_default() += by;
        }
    }
}

fn mask_text(mask: VmMask) -> String {
    let members: Vec<String> = (0..32)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| (i + 1).to_string())
        .collect();
    format!("{{{}}}", members.join(","))
}

/// `type:subset=count` entries joined by `;`, sorted lexicographically, e.g.
/// `big:{}=2;big:{1,2}=2;small:{2}=4`. VMs are numbered from 1.
impl fmt::Display for CanonicalSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self
            .entries()
            .map(|(t, m, c)| format!("{}:{}={}", t, mask_text(m), c))
            .collect();
        parts.sort();
        f.write_str(&parts.join(";"))
    }
}

/// Maps a strategy to its equivalence-class signature.
pub fn canonicalize(s: &Strategy, topo: &CoreTopology) -> Result<CanonicalSignature, StrategyError> {
    if s.vm_count() > 32 {
        return Err(StrategyError::VmCount(s.vm_count()));
    }
    for subset in &s.per_vm {
        if let Some(c) = subset.iter().find(|c| topo.core_type(**c).is_none()) {
            return Err(StrategyError::UnknownCore(*c));
        }
    }
    let mut sig = CanonicalSignature::default();
    for (ty, cores) in [(CoreType::Small, &topo.small), (CoreType::Big, &topo.big)] {
        for core in cores {
            let mask = s
                .per_vm
                .iter()
                .enumerate()
                .filter(|(_, set)| set.contains(core))
                .fold(0, |m, (i, _)| m | (1 << i));
            sig.bump(ty, mask, 1);
        }
    }
    Ok(sig)
}

/// `C(n, k)` with overflow detection.
pub fn binomial(n: u128, k: u128) -> Result<u128, StrategyError> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        // r == C(n, i) here, and C(n, i) * (n - i) is divisible by i + 1.
        r = r.checked_mul(n - i).ok_or(StrategyError::Overflow)? / (i + 1);
    }
    Ok(r)
}

/// Number of distinct strategies for `n` small cores, `m` big cores and `x`
/// VMs: `C(2^x + n - 1, n) * C(2^x + m - 1, m)`.
pub fn strategy_count_formula(n: u64, m: u64, x: u32) -> Result<u128, StrategyError> {
    let labels = 1u128.checked_shl(x).filter(|_| x < 127).ok_or(StrategyError::Overflow)?;
    let multichoose = |k: u64| -> Result<u128, StrategyError> {
        let top = labels
            .checked_add(k as u128)
            .and_then(|v| v.checked_sub(1))
            .ok_or(StrategyError::Overflow)?;
        binomial(top, k as u128)
    };
    multichoose(n)?
        .checked_mul(multichoose(m)?)
        .ok_or(StrategyError::Overflow)
}

/// All weak compositions of `total` into `parts` non-negative parts.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn go(remaining: usize, parts: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            cur.push(remaining);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in 0..=remaining {
            cur.push(v);
            go(remaining - v, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if parts == 0 {
        if total == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    go(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

/// Enumerates the distinct signatures of all strategies over `n` small and `m`
/// big cores for `x` VMs, keeping those where every `|Y_i|` is in
/// `allowed_sizes` (all sizes when `None`).
///
/// Enumeration walks per-type count tables, not raw labelings; `cap` still
/// bounds the raw labeling count `(2^x)^(n+m)` so callers get a predictable
/// refusal on large inputs.
pub fn enumerate_strategies(
    n: usize,
    m: usize,
    x: usize,
    allowed_sizes: Option<&BTreeSet<usize>>,
    cap: u128,
) -> Result<BTreeSet<CanonicalSignature>, StrategyError> {
    if x == 0 || x > 16 {
        return Err(StrategyError::VmCount(x));
    }
    let labels = 1usize << x;
    let labelings = (labels as u128).checked_pow((n + m) as u32);
    match labelings {
        Some(l) if l <= cap => {}
        other => {
            return Err(StrategyError::SpaceTooLarge {
                labelings: other.map_or_else(|| "> 2^128".to_string(), |l| l.to_string()),
                cap,
            })
        }
    }
    let small = compositions(n, labels);
    let big = compositions(m, labels);
    let mut out = BTreeSet::new();
    let mut sizes = vec![0usize; x];
    for s in &small {
        for b in &big {
            sizes.iter_mut().for_each(|v| *v = 0);
            for mask in 0..labels {
                let cores = s[mask] + b[mask];
                if cores == 0 {
                    continue;
                }
                for (vm, size) in sizes.iter_mut().enumerate() {
                    if mask & (1 << vm) != 0 {
                        *size += cores;
                    }
                }
            }
            if let Some(allowed) = allowed_sizes {
                if !sizes.iter().all(|sz| allowed.contains(sz)) {
                    continue;
                }
            }
            let mut sig = CanonicalSignature::default();
            for mask in 0..labels {
                sig.bump(CoreType::Small, mask as VmMask, s[mask]);
                sig.bump(CoreType::Big, mask as VmMask, b[mask]);
            }
            out.insert(sig);
        }
    }
    Ok(out)
}

/// Builds a concrete strategy realising `sig` on `topo`, assigning cores of
/// each type in ascending id order.
pub fn realize(sig: &CanonicalSignature, topo: &CoreTopology, x: usize) -> Result<Strategy, StrategyError> {
    let mut per_vm = vec![CoreSet::new(); x];
    for (ty, cores) in [(CoreType::Small, topo.small()), (CoreType::Big, topo.big())] {
        let mut it = cores.iter();
        for (t, mask, count) in sig.entries() {
            if t != ty {
                continue;
            }
            for _ in 0..count {
                let core = *it.next().ok_or(StrategyError::UnknownCore(CoreId::MAX))?;
                for (vm, set) in per_vm.iter_mut().enumerate() {
                    if mask & (1 << vm) != 0 {
                        set.insert(core);
                    }
                }
            }
        }
    }
    Ok(Strategy::new(per_vm))
}

/// Emulators of every VM bound to the same cores as the vCPUs: all cores.
pub fn baseline_strategy(topo: &CoreTopology, x: usize) -> Strategy {
    Strategy::new(vec![topo.all(); x])
}
