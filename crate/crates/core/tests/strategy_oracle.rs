use std::collections::{BTreeSet, HashSet};

use emuctl_core::strategy::{
    canonicalize, enumerate_strategies, realize, strategy_count_formula, CoreTopology, Strategy,
    DEFAULT_ENUMERATION_CAP,
};
use emuctl_core::{CoreId, CoreSet};
use proptest::prelude::*;

/// A labeling gives each core (small first, then big) the bitmask of VMs
/// using it.
fn labelings(cores: usize, x: usize) -> impl Iterator<Item = Vec<u32>> {
    let labels = 1u64 << x;
    let total = labels.pow(cores as u32);
    (0..total).map(move |mut code| {
        let mut out = Vec::with_capacity(cores);
        for _ in 0..cores {
            out.push((code % labels) as u32);
            code /= labels;
        }
        out
    })
}

fn vm_sizes(lab: &[u32], x: usize) -> Vec<usize> {
    (0..x)
        .map(|vm| lab.iter().filter(|m| *m & (1 << vm) != 0).count())
        .collect()
}

/// Brute-force class key: the sorted per-type label multisets.
fn oracle_key(lab: &[u32], n: usize) -> (Vec<u32>, Vec<u32>) {
    let mut s = lab[..n].to_vec();
    let mut b = lab[n..].to_vec();
    s.sort_unstable();
    b.sort_unstable();
    (s, b)
}

fn oracle_count(n: usize, m: usize, x: usize, allowed: Option<&BTreeSet<usize>>) -> usize {
    let mut seen = HashSet::new();
    for lab in labelings(n + m, x) {
        if let Some(a) = allowed {
            if !vm_sizes(&lab, x).iter().all(|s| a.contains(s)) {
                continue;
            }
        }
        seen.insert(oracle_key(&lab, n));
    }
    seen.len()
}

fn to_strategy(lab: &[u32], x: usize) -> Strategy {
    let per_vm = (0..x)
        .map(|vm| {
            lab.iter()
                .enumerate()
                .filter(|(_, m)| *m & (1 << vm) != 0)
                .map(|(c, _)| c as CoreId)
                .collect::<CoreSet>()
        })
        .collect();
    Strategy::new(per_vm)
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Whether some type-preserving core relabelling maps `a` onto `b`.
fn related(a: &[u32], b: &[u32], n: usize) -> bool {
    let small: Vec<usize> = (0..n).collect();
    let big: Vec<usize> = (n..a.len()).collect();
    for ps in permutations(&small) {
        for pb in permutations(&big) {
            let perm: Vec<usize> = ps.iter().chain(pb.iter()).copied().collect();
            if (0..a.len()).all(|c| a[perm[c]] == b[c]) {
                return true;
            }
        }
    }
    false
}

#[test]
fn reference_size_restricted_count() {
    let sizes: BTreeSet<usize> = [1, 2, 4, 8].into();
    let got = enumerate_strategies(4, 4, 2, Some(&sizes), DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(got.len(), 220);
    assert_eq!(oracle_count(4, 4, 2, Some(&sizes)), 220);
}

#[test]
fn enumeration_matches_formula_and_oracle() {
    for x in 1..=2usize {
        for n in 0..=4usize {
            for m in 0..=4usize {
                let got = enumerate_strategies(n, m, x, None, DEFAULT_ENUMERATION_CAP).unwrap().len();
                let formula = strategy_count_formula(n as u64, m as u64, x as u32).unwrap();
                assert_eq!(got as u128, formula, "n={n} m={m} x={x}");
                assert_eq!(got, oracle_count(n, m, x, None), "n={n} m={m} x={x}");
            }
        }
    }
}

#[test]
fn signatures_are_exactly_the_orbits() {
    let (n, m, x) = (2, 2, 2);
    let topo = CoreTopology::sequential(n, m);
    let all: Vec<Vec<u32>> = labelings(n + m, x).collect();
    let sigs: Vec<_> = all
        .iter()
        .map(|l| canonicalize(&to_strategy(l, x), &topo).unwrap())
        .collect();
    for i in 0..all.len() {
        for j in i..all.len() {
            assert_eq!(
                sigs[i] == sigs[j],
                related(&all[i], &all[j], n),
                "{:?} vs {:?}",
                all[i],
                all[j]
            );
        }
    }
}

#[test]
fn realized_signature_canonicalizes_to_itself() {
    let topo = CoreTopology::sequential(3, 2);
    for sig in enumerate_strategies(3, 2, 2, None, DEFAULT_ENUMERATION_CAP).unwrap() {
        let s = realize(&sig, &topo, 2).unwrap();
        assert_eq!(canonicalize(&s, &topo).unwrap(), sig);
    }
}

#[test]
fn widening_allowed_sizes_never_shrinks_the_count() {
    let steps: [&[usize]; 4] = [&[4], &[2, 4], &[1, 2, 4], &[1, 2, 4, 8]];
    let mut prev = 0;
    for s in steps {
        let allowed: BTreeSet<usize> = s.iter().copied().collect();
        let c = enumerate_strategies(4, 4, 2, Some(&allowed), DEFAULT_ENUMERATION_CAP)
            .unwrap()
            .len();
        assert!(c >= prev, "{s:?}: {c} < {prev}");
        prev = c;
    }
    let all = enumerate_strategies(4, 4, 2, None, DEFAULT_ENUMERATION_CAP).unwrap().len();
    assert!(prev <= all);
}

#[test]
fn cap_refuses_large_spaces() {
    assert!(enumerate_strategies(16, 16, 4, None, DEFAULT_ENUMERATION_CAP).is_err());
}

proptest! {
    #[test]
    fn canonicalize_ignores_relabelling_within_type(
        lab in prop::collection::vec(0u32..8, 7),
        seed in any::<u64>(),
    ) {
        let (n, x) = (4usize, 3usize);
        let topo = CoreTopology::sequential(n, lab.len() - n);
        let base = canonicalize(&to_strategy(&lab, x), &topo).unwrap();

        // Fisher-Yates within each type, driven by `seed`.
        let mut perm: Vec<usize> = (0..lab.len()).collect();
        let mut state = seed | 1;
        let mut next = |bound: usize| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % bound as u64) as usize
        };
        for i in (1..n).rev() {
            perm.swap(i, next(i + 1));
        }
        for i in (n + 1..lab.len()).rev() {
            let j = n + next(i - n + 1);
            perm.swap(i, j);
        }
        let moved: Vec<u32> = perm.iter().map(|&p| lab[p]).collect();
        prop_assert_eq!(canonicalize(&to_strategy(&moved, x), &topo).unwrap(), base);
    }

    #[test]
    fn swapping_core_types_is_detected(lab in prop::collection::vec(1u32..4, 2)) {
        // One small and one big core carrying different labels: swapping them
        // crosses types, so the signature must change.
        prop_assume!(lab[0] != lab[1]);
        let topo = CoreTopology::sequential(1, 1);
        let a = canonicalize(&to_strategy(&lab, 2), &topo).unwrap();
        let b = canonicalize(&to_strategy(&[lab[1], lab[0]], 2), &topo).unwrap();
        prop_assert_ne!(a, b);
    }
}
