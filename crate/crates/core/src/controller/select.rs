use std::collections::BTreeMap;

use super::ControllerError;
use crate::{CoreId, CoreSet, VmId};

/// VM with the highest emulator utilization; ties go to the smallest id.
pub fn select_next_vm<'a, I>(vms: I) -> Result<VmId, ControllerError>
where
    I: IntoIterator<Item = (&'a VmId, f64)>,
{
    let mut best: Option<(&VmId, f64)> = None;
    for (id, util) in vms {
        best = match best {
            None => Some((id, util)),
            Some((bid, butil)) => {
                if util > butil || (util == butil && id < bid) {
                    Some((id, util))
                } else {
                    Some((bid, butil))
                }
            }
        };
    }
    best.map(|(id, _)| id.clone()).ok_or(ControllerError::EmptySet)
}

/// The `k` small cores with the lowest utilization, ties by smallest id.
/// Cores missing from `util` count as idle.
pub fn choose_cores(
    k: usize,
    small_cores: &CoreSet,
    util: &BTreeMap<CoreId, f64>,
) -> Result<CoreSet, ControllerError> {
    if k == 0 || k > small_cores.len() {
        return Err(ControllerError::KOutOfRange {
            k,
            n: small_cores.len(),
        });
    }
    let mut ranked: Vec<(f64, CoreId)> = small_cores
        .iter()
        .map(|c| (util.get(c).copied().unwrap_or(0.0), *c))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, c)| c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn highest_utilization_wins() {
        let a = VmId::from("A");
        let b = VmId::from("B");
        assert_eq!(select_next_vm([(&a, 0.4), (&b, 0.7)]).unwrap(), b);
        assert_eq!(select_next_vm([(&b, 0.5), (&a, 0.5)]).unwrap(), a);
        assert_eq!(select_next_vm([(&a, 0.2)]).unwrap(), a);
        assert_eq!(select_next_vm(std::iter::empty()), Err(ControllerError::EmptySet));
    }

    #[test]
    fn lowest_utilization_cores() {
        let small: CoreSet = (0..4).collect();
        let util = BTreeMap::from([(0, 0.1), (1, 0.9), (2, 0.2), (3, 0.5)]);
        assert_eq!(choose_cores(2, &small, &util).unwrap(), CoreSet::from([0, 2]));
        assert_eq!(choose_cores(4, &small, &util).unwrap(), small);
        let flat = BTreeMap::from([(0, 0.3), (1, 0.3), (2, 0.3), (3, 0.3)]);
        assert_eq!(choose_cores(1, &small, &flat).unwrap(), CoreSet::from([0]));
        assert!(matches!(choose_cores(0, &small, &util), Err(ControllerError::KOutOfRange { .. })));
        assert!(matches!(choose_cores(5, &small, &util), Err(ControllerError::KOutOfRange { .. })));
    }
}
