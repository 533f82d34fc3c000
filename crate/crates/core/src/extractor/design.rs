//! Block weak design built from polynomial-graph basic designs over `GF(w)`.
//!
//! In a basic design on `w²` seed positions, set `i` is the graph
//! `{a·w + p_i(a) mod w : a ∈ GF(w)}` of the polynomial whose coefficients are
//! the base-`w` digits of `i` (lowest first). Blocks occupy disjoint `w²`
//! ranges of the seed.

use super::params::{ExtractorParams, block_sizes};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakDesign {
    pub w: u64,
    /// Sorted seed positions of each set.
    pub sets: Vec<Vec<u64>>,
}

/// Graph of the polynomial with base-`w` digits of `index` over `GF(w)`.
fn polynomial_set(index: u64, w: u64, offset: u64) -> Vec<u64> {
    let mut coeffs = Vec::new();
    let mut i = index;
    while i > 0 {
        coeffs.push(i % w);
        i /= w;
    }
    (0..w)
        .map(|a| {
            let p = coeffs.iter().rev().fold(0, |acc, &c| (acc * a + c) % w);
            offset + a * w + p
        })
        .collect()
}

pub fn weak_design(params: &ExtractorParams) -> WeakDesign {
    let w = params.w;
    let mut sets = Vec::with_capacity(params.k as usize);
    for (b, &size) in block_sizes(params.k, w, params.blocks).iter().enumerate() {
        for i in 0..size {
            sets.push(polynomial_set(i, w, b as u64 * w * w));
        }
    }
    WeakDesign { w, sets }
}

impl WeakDesign {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn max_index(&self) -> Option<u64> {
        self.sets.iter().filter_map(|s| s.last().copied()).max()
    }

    /// `Σ_{j<i} 2^{|S_i ∩ S_j|}`.
    pub fn overlap_weight(&self, i: usize) -> f64 {
        self.sets[..i]
            .iter()
            .map(|s| 2f64.powi(intersection_size(&self.sets[i], s) as i32))
            .sum()
    }
}

fn intersection_size(a: &[u64], b: &[u64]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use std::collections::HashSet;

    fn params(w: u64, k: u64, blocks: u64) -> ExtractorParams {
        ExtractorParams {
            m: k.max(1),
            k,
            eps_x: 1.0,
            delta_x: 0.5,
            w,
            blocks,
            d_provided: blocks * w * w,
            d_used: 0,
        }
    }

    #[test]
    fn single_set_is_the_zero_graph() {
        for w in [2u64, 3, 5, 11, 631] {
            let d = weak_design(&params(w, 1, 2));
            let want: Vec<u64> = (0..w).map(|a| a * w).collect();
            assert_eq!(d.sets, vec![want]);
        }
    }

    #[test]
    fn sets_are_sorted_and_sized() {
        for (w, k, blocks) in [(5, 5, 2), (5, 30, 2), (7, 200, 4), (11, 8, 2)] {
            let d = weak_design(&params(w, k, blocks));
            assert_eq!(d.len() as u64, k);
            for s in &d.sets {
                assert_eq!(s.len() as u64, w);
                assert!(s.windows(2).all(|p| p[0] < p[1]));
                assert!(*s.last().unwrap() < blocks * w * w);
            }
            let distinct: HashSet<&Vec<u64>> = d.sets.iter().collect();
            assert_eq!(distinct.len(), d.len());
        }
    }

    #[test]
    fn lines_meet_at_most_once() {
        let d = weak_design(&params(5, 25, 2));
        for i in 0..d.len() {
            for j in 0..i {
                assert!(intersection_size(&d.sets[i], &d.sets[j]) <= 1);
            }
        }
    }

    #[test]
    fn overlap_bound_holds_exhaustively() {
        let bound = |k: u64| 2.0 * std::f64::consts::E * k as f64;
        for w in [2u64, 3, 5, 7, 11, 13] {
            let mut ks = vec![
                1,
                2,
                w - 1,
                w,
                w + 1,
                2 * w,
                w * w - 1,
                w * w,
                w * w + 1,
                2 * w * w,
                3 * w * w,
            ];
            ks.retain(|&k| k >= 1);
            for k in ks {
                let p = ExtractorParams {
                    blocks: super::super::params::block_count(k, w),
                    ..params(w, k, 2)
                };
                let d = weak_design(&p);
                for i in 0..d.len() {
                    assert!(d.overlap_weight(i) <= bound(k), "w={w} k={k} i={i}");
                }
            }
        }
    }

    #[test]
    fn published_design_fits_the_first_block() {
        let p = ExtractorParams::new(2 * reference::TRIAL_BUDGETS[0], 512, 0.2 * reference::EPSILON).unwrap();
        let d = weak_design(&p);
        assert_eq!(d.len(), 512);
        assert!(d.max_index().unwrap() < reference::SEED_BITS_USED);
    }
}
