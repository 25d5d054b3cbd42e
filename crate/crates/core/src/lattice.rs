//! Truncated enumeration of the reachable states `FS(Atom(nu))`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::error::{Error, Result};
use crate::jumps::JumpDistribution;

const DEDUP_TOL: f64 = 1e-12;

/// All sums of at most `K` atoms, deduplicated.
///
/// Ordinal 0 is always the state 0; the remaining states follow in ascending
/// order. `successor(i, j)` is the ordinal reached from state `i` by atom `j`,
/// or `None` when the sum leaves the truncated lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLattice {
    states: Vec<f64>,
    max_jumps: usize,
    // (value, ordinal) sorted by value
    sorted: Vec<(f64, usize)>,
    successors: Vec<Vec<Option<usize>>>,
}

impl StateLattice {
    pub fn build(nu: &JumpDistribution, max_jumps: usize) -> Result<Self> {
        if max_jumps == 0 {
            return Err(Error::InvalidLattice("max_jumps must be at least 1".into()));
        }
        if nu.is_empty() {
            return Err(Error::InvalidLattice("jump law has no atoms".into()));
        }
        let mut all = vec![0.0];
        let mut frontier = vec![0.0];
        for _ in 0..max_jumps {
            let mut next: Vec<f64> = frontier
                .iter()
                .flat_map(|x| nu.atoms().iter().map(move |a| x + a))
                .collect();
            dedup_sorted(&mut next);
            all.extend_from_slice(&next);
            frontier = next;
        }
        dedup_sorted(&mut all);

        let mut states = Vec::with_capacity(all.len());
        states.push(0.0);
        states.extend(all.iter().copied().filter(|x| x.abs() > DEDUP_TOL));

        let mut sorted: Vec<(f64, usize)> = states.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut lattice = Self {
            states,
            max_jumps,
            sorted,
            successors: Vec::new(),
        };
        lattice.successors = (0..lattice.len())
            .map(|i| {
                nu.atoms()
                    .iter()
                    .map(|a| lattice.ordinal(lattice.states[i] + a))
                    .collect()
            })
            .collect();
        Ok(lattice)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, ordinal: usize) -> f64 {
        self.states[ordinal]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn max_jumps(&self) -> usize {
        self.max_jumps
    }

    pub fn ordinal(&self, value: f64) -> Option<usize> {
        let pos = self.sorted.partition_point(|(v, _)| *v < value - DEDUP_TOL);
        self.sorted
            .get(pos)
            .filter(|(v, _)| (v - value).abs() <= DEDUP_TOL)
            .map(|(_, i)| *i)
    }

    pub fn successor(&self, ordinal: usize, atom_index: usize) -> Option<usize> {
        self.successors[ordinal][atom_index]
    }

    /// Ordinals in ascending order of state value.
    pub fn ascending(&self) -> impl Iterator<Item = usize> + '_ {
        self.sorted.iter().map(|(_, i)| *i)
    }

    pub fn contains(&self, other: &StateLattice) -> bool {
        other.states.iter().all(|&x| self.ordinal(x).is_some())
    }
}

fn dedup_sorted(v: &mut Vec<f64>) {
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup_by(|a, b| (*a - *b).abs() <= DEDUP_TOL);
}

/// Smallest `K` with `P(Poisson(mean) > K) < tail`.
pub fn poisson_truncation_depth(mean: f64, tail: f64) -> usize {
    if mean <= 0.0 {
        return 1;
    }
    let pois = Poisson::new(mean).expect("positive mean");
    let mut k = 1u64;
    while pois.sf(k) >= tail {
        k += 1;
    }
    k as usize
}

/// Poisson tail rule: `P(Poisson(max_rate * T) > K) < tail`.
pub fn auto_depth(bounds: &crate::grid::Bounds, horizon: f64, tail: f64) -> usize {
    poisson_truncation_depth(bounds.max_rate() * horizon, tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(l: &StateLattice) -> Vec<f64> {
        let mut v = l.states().to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    #[test]
    fn counting_lattice() {
        let l = StateLattice::build(&JumpDistribution::unit(), 3).unwrap();
        assert_eq!(l.states(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(l.successor(2, 0), Some(3));
        assert_eq!(l.successor(3, 0), None);
    }

    #[test]
    fn symmetric_walk_lattice() {
        let nu = JumpDistribution::new(vec![1.0, -1.0], vec![0.7, 0.3]).unwrap();
        let l = StateLattice::build(&nu, 2).unwrap();
        assert_eq!(values(&l), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(l.state(0), 0.0);
        assert_eq!(l.states(), &[0.0, -2.0, -1.0, 1.0, 2.0]);
    }

    #[test]
    fn two_three_lattice() {
        let nu = JumpDistribution::new(vec![2.0, 3.0], vec![0.5, 0.5]).unwrap();
        let l = StateLattice::build(&nu, 2).unwrap();
        assert_eq!(values(&l), vec![0.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(l.ordinal(5.0), Some(4));
        assert_eq!(l.ordinal(1.0), None);
    }

    #[test]
    fn float_atoms_collide_within_tolerance() {
        let nu = JumpDistribution::new(vec![0.1, 0.2], vec![0.5, 0.5]).unwrap();
        let l = StateLattice::build(&nu, 3).unwrap();
        // 0.1+0.2 and 0.2+0.1 and 0.1+0.1+0.1 are one state
        assert_eq!(l.len(), 7);
    }

    #[test]
    fn rejects_zero_depth() {
        assert!(StateLattice::build(&JumpDistribution::unit(), 0).is_err());
    }

    #[test]
    fn poisson_rule() {
        let k = poisson_truncation_depth(4.0, 1e-6);
        let pois = Poisson::new(4.0).unwrap();
        assert!(pois.sf(k as u64) < 1e-6);
        assert!(pois.sf(k as u64 - 1) >= 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn lattice_monotone_in_depth(k in 1usize..6, a in 1i32..4, b in -3i32..-1) {
            let nu = JumpDistribution::new(vec![a as f64, b as f64], vec![0.5, 0.5]).unwrap();
            let small = StateLattice::build(&nu, k).unwrap();
            let big = StateLattice::build(&nu, k + 1).unwrap();
            proptest::prop_assert!(big.contains(&small));
        }

        #[test]
        fn positive_atoms_start_at_zero(k in 1usize..6, a in 1i32..5, b in 5i32..9) {
            let nu = JumpDistribution::new(vec![a as f64, b as f64], vec![0.3, 0.7]).unwrap();
            let l = StateLattice::build(&nu, k).unwrap();
            let min = l.states().iter().copied().fold(f64::INFINITY, f64::min);
            proptest::prop_assert_eq!(min, 0.0);
        }
    }
}
