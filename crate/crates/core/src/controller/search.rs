//! Knee search on the emulator run-delay curve.
//!
//! With the emulator bound to all `n` small cores the delay rate is `v2`.
//! Shrinking to `n1` cores raises it to `v1`; the increase is *significant*
//! when the average slope `(v1 - v2) / (n - n1)` exceeds `l1`. On a convex,
//! decreasing curve the predicate holds for every core count left of the knee
//! and fails to its right, so the smallest count where it fails is found by
//! bisection in at most `ceil(log2 n)` probes after the reference probe at `n`.

use log::warn;

use super::ControllerError;

/// Smallest `l1` the adaptive rule will produce (ns of delay per second per core).
pub const MIN_L1: f64 = 1.0;

/// Whether shrinking from `n` to `n1` cores raised the delay rate from `v2` to
/// `v1` by more than `l1` per removed core.
pub fn significant_increase(v1: f64, v2: f64, n: usize, n1: usize, l1: f64) -> Result<bool, ControllerError> {
    if n1 >= n {
        return Err(ControllerError::DegenerateDenominator { n, n1 });
    }
    Ok((v1 - v2) / (n - n1) as f64 > l1)
}

/// How the slope threshold is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeThreshold {
    Fixed(f64),
    /// `scale * v2 / (n - 1)`, floored at [`MIN_L1`].
    Adaptive { scale: f64 },
}

impl SlopeThreshold {
    pub fn resolve(&self, v2: f64, n: usize) -> f64 {
        match *self {
            SlopeThreshold::Fixed(l1) => l1,
            SlopeThreshold::Adaptive { scale } => {
                if n <= 1 {
                    MIN_L1
                } else {
                    (scale * v2 / (n - 1) as f64).max(MIN_L1)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub k: usize,
    pub delay: f64,
    /// `None` for the reference probe at `k = n`.
    pub significant: Option<bool>,
}

/// Incremental bisection state, driven one probe at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySearch {
    n: usize,
    threshold: SlopeThreshold,
    l1: Option<f64>,
    v2: Option<f64>,
    lo: usize,
    hi: usize,
    probes: Vec<ProbeResult>,
    non_monotone: bool,
}

impl BinarySearch {
    pub fn new(n: usize, threshold: SlopeThreshold) -> Result<Self, ControllerError> {
        if n == 0 {
            return Err(ControllerError::NoSmallCores);
        }
        Ok(BinarySearch {
            n,
            threshold,
            l1: None,
            v2: None,
            lo: 1,
            hi: n,
            probes: Vec::new(),
            non_monotone: false,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Current bounds `(lo, hi)`; the answer lies in `lo..=hi`.
    pub fn bounds(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    pub fn reference_delay(&self) -> Option<f64> {
        self.v2
    }

    pub fn l1(&self) -> Option<f64> {
        self.l1
    }

    pub fn probes(&self) -> &[ProbeResult] {
        &self.probes
    }

    pub fn non_monotone(&self) -> bool {
        self.non_monotone
    }

    /// Core count to probe next; `None` once the search has converged.
    pub fn next_k(&self) -> Option<usize> {
        if self.v2.is_none() {
            return Some(self.n);
        }
        if self.lo < self.hi {
            Some((self.lo + self.hi) / 2)
        } else {
            None
        }
    }

    /// Records the measured delay rate for `k` cores. `k` must equal
    /// [`next_k`](Self::next_k).
    pub fn record(&mut self, k: usize, delay: f64) -> Result<(), ControllerError> {
        if Some(k) != self.next_k() {
            return Err(ControllerError::UnexpectedProbe(k));
        }
        let Some(v2) = self.v2 else {
            self.v2 = Some(delay);
            self.l1 = Some(self.threshold.resolve(delay, self.n));
            self.probes.push(ProbeResult {
                k,
                delay,
                significant: None,
            });
            return Ok(());
        };
        let l1 = self.l1.expect("resolved with v2");
        let significant = significant_increase(delay, v2, self.n, k, l1)?;
        if significant {
            self.lo = k + 1;
        } else {
            self.hi = k;
        }
        self.probes.push(ProbeResult {
            k,
            delay,
            significant: Some(significant),
        });
        if self.violating_pair().is_some() && !self.non_monotone {
            self.non_monotone = true;
            warn!("non-monotone delay curve observed: {:?}", self.probes);
        }
        Ok(())
    }

    /// A pair of probes where more cores gave more delay (by over `l1`), as
    /// `(smaller k, larger k)`.
    fn violating_pair(&self) -> Option<(usize, usize)> {
        let tol = self.l1.unwrap_or(MIN_L1);
        let mut worst = None;
        for a in &self.probes {
            for b in &self.probes {
                if a.k < b.k && a.delay + tol < b.delay {
                    worst = match worst {
                        Some((_, kb)) if kb >= b.k => worst,
                        _ => Some((a.k, b.k)),
                    };
                }
            }
        }
        worst
    }

    /// Converged core count. When the probes contradicted a decreasing curve
    /// the larger candidate of the offending pair is kept.
    pub fn result(&self) -> Option<usize> {
        if self.next_k().is_some() {
            return None;
        }
        let mut k = self.hi;
        if self.non_monotone {
            if let Some((_, kb)) = self.violating_pair() {
                k = k.max(kb);
            }
        }
        Some(k.min(self.n))
    }
}

/// Outcome of a complete search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub k: usize,
    /// Number of `delay_at` evaluations, including the reference probe.
    pub probes: usize,
    pub non_monotone: bool,
}

/// Runs the bisection against `delay_at`, evaluating `delay_at(n)` first.
pub fn plan_binary_search<F: FnMut(usize) -> f64>(
    mut delay_at: F,
    n: usize,
    l1: SlopeThreshold,
) -> Result<SearchOutcome, ControllerError> {
    let mut search = BinarySearch::new(n, l1)?;
    while let Some(k) = search.next_k() {
        let v = delay_at(k);
        search.record(k, v)?;
    }
    Ok(SearchOutcome {
        k: search.result().expect("converged"),
        probes: search.probes().len(),
        non_monotone: search.non_monotone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significance_examples() {
        assert!(significant_increase(100.0, 50.0, 8, 4, 10.0).unwrap());
        assert!(!significant_increase(60.0, 50.0, 8, 4, 10.0).unwrap());
        assert_eq!(
            significant_increase(60.0, 50.0, 8, 8, 10.0),
            Err(ControllerError::DegenerateDenominator { n: 8, n1: 8 })
        );
    }

    #[test]
    fn inverse_curve_knee() {
        let out = plan_binary_search(|k| 1000.0 / k as f64, 8, SlopeThreshold::Fixed(50.0)).unwrap();
        assert_eq!(out.k, 3);
        assert!(out.probes <= 4);
        assert!(!out.non_monotone);
    }

    #[test]
    fn flat_curve_shrinks_fully() {
        let out = plan_binary_search(|_| 42.0, 8, SlopeThreshold::Fixed(2.0)).unwrap();
        assert_eq!(out.k, 1);
    }

    #[test]
    fn steep_curve_keeps_everything() {
        let out = plan_binary_search(|k| 10000.0 / k as f64, 8, SlopeThreshold::Fixed(1.5)).unwrap();
        assert_eq!(out.k, 8);
    }

    #[test]
    fn single_core_needs_one_probe() {
        let out = plan_binary_search(|_| 5.0, 1, SlopeThreshold::Adaptive { scale: 0.15 }).unwrap();
        assert_eq!(out, SearchOutcome { k: 1, probes: 1, non_monotone: false });
    }

    #[test]
    fn non_monotone_keeps_larger_candidate() {
        // n = 8: probes 8, 4 (true), 6 (false), 5 (false). Delay at 6 exceeds 5.
        let curve = |k: usize| match k {
            8 => 100.0,
            4 => 400.0,
            6 => 160.0,
            5 => 120.0,
            _ => 1000.0,
        };
        let out = plan_binary_search(curve, 8, SlopeThreshold::Fixed(30.0)).unwrap();
        assert!(out.non_monotone);
        assert_eq!(out.k, 6);
    }

    #[test]
    fn adaptive_threshold_floor() {
        let t = SlopeThreshold::Adaptive { scale: 0.15 };
        assert_eq!(t.resolve(0.0, 4), MIN_L1);
        assert!((t.resolve(3.0e6, 4) - 150_000.0).abs() < 1e-6);
    }

    #[test]
    fn out_of_order_probe_rejected() {
        let mut s = BinarySearch::new(4, SlopeThreshold::Fixed(2.0)).unwrap();
        assert_eq!(s.record(2, 1.0), Err(ControllerError::UnexpectedProbe(2)));
        assert!(BinarySearch::new(0, SlopeThreshold::Fixed(2.0)).is_err());
    }
}
