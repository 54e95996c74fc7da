//! Exhaustive search over all feasible activation matrices of a small instance.
//!
//! Each client column is enumerated as a bitmask over blocks with between one
//! and `budget` bits set; the product over clients is filtered to matrices in
//! which every block is covered.

use super::AllocationProblem;
use crate::error::{Error, Result};
use crate::metrics::BlockActivationMatrix;

/// Largest `M·N` accepted by [`brute_force_optimum`].
pub const MAX_CELLS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceOptimum {
    /// Maximum over feasible matrices of `min_n c̲_n`.
    pub gamma_max: usize,
    /// Minimum over feasible matrices of `Λ`.
    pub lambda_min: f64,
    pub gamma_witness: BlockActivationMatrix,
    pub lambda_witness: BlockActivationMatrix,
    /// Number of feasible matrices visited.
    pub feasible: u64,
}

pub fn brute_force_optimum(blocks: usize, budgets: &[usize]) -> Result<BruteForceOptimum> {
    let clients = budgets.len();
    if blocks == 0 || clients == 0 {
        return Err(Error::invalid("instance needs at least one block and one client"));
    }
    if blocks * clients > MAX_CELLS {
        return Err(Error::InstanceTooLarge(format!(
            "{blocks}×{clients} exceeds {MAX_CELLS} cells"
        )));
    }
    let full: u32 = (1u32 << blocks) - 1;
    let options: Vec<Vec<u32>> = budgets
        .iter()
        .map(|&b| {
            (1..=full)
                .filter(|mask| (mask.count_ones() as usize) <= b)
                .collect()
        })
        .collect();
    if options.iter().any(Vec::is_empty) {
        return Err(Error::InfeasibleEpsilon("a client has zero budget".into()));
    }

    let mut choice = vec![0usize; clients];
    let mut masks = vec![0u32; clients];
    let mut best_gamma: Option<(usize, Vec<u32>)> = None;
    let mut best_lambda: Option<(f64, Vec<u32>)> = None;
    let mut feasible = 0u64;
    let mut counts = vec![0usize; blocks];

    'outer: loop {
        for n in 0..clients {
            masks[n] = options[n][choice[n]];
        }
        let covered = masks.iter().fold(0u32, |acc, &m| acc | m);
        if covered == full {
            feasible += 1;
            counts.iter_mut().for_each(|c| *c = 0);
            for &mask in &masks {
                for (m, c) in counts.iter_mut().enumerate() {
                    *c += ((mask >> m) & 1) as usize;
                }
            }
            let mut min_least = usize::MAX;
            let mut lambda = 0.0;
            for &mask in &masks {
                let least = (0..blocks)
                    .filter(|m| (mask >> m) & 1 == 1)
                    .map(|m| counts[m])
                    .min()
                    .expect("non-empty column");
                min_least = min_least.min(least);
                lambda += 1.0 / (least * least) as f64;
            }
            if best_gamma.as_ref().is_none_or(|(g, _)| min_least > *g) {
                best_gamma = Some((min_least, masks.clone()));
            }
            if best_lambda.as_ref().is_none_or(|(l, _)| lambda < *l) {
                best_lambda = Some((lambda, masks.clone()));
            }
        }
        // odometer
        for n in 0..clients {
            choice[n] += 1;
            if choice[n] < options[n].len() {
                continue 'outer;
            }
            choice[n] = 0;
        }
        break;
    }

    let to_matrix = |masks: &[u32]| {
        let mut a = BlockActivationMatrix::zeros(blocks, clients);
        for (n, &mask) in masks.iter().enumerate() {
            for m in 0..blocks {
                a.set(m, n, (mask >> m) & 1 == 1);
            }
        }
        a
    };
    match (best_gamma, best_lambda) {
        (Some((gamma_max, gw)), Some((lambda_min, lw))) => Ok(BruteForceOptimum {
            gamma_max,
            lambda_min,
            gamma_witness: to_matrix(&gw),
            lambda_witness: to_matrix(&lw),
            feasible,
        }),
        _ => Err(Error::InfeasibleEpsilon(format!(
            "budgets {budgets:?} cannot cover {blocks} blocks"
        ))),
    }
}

impl AllocationProblem {
    /// Exhaustive optimum of this instance (integer budgets).
    pub fn brute_force(&self) -> Result<BruteForceOptimum> {
        brute_force_optimum(self.blocks(), self.budgets())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{lambda_value, popularity};

    #[test]
    fn unit_budgets() {
        let r = brute_force_optimum(3, &[1, 1, 1]).unwrap();
        assert_eq!(r.gamma_max, 1);
        assert_eq!(r.lambda_min, 3.0);
    }

    #[test]
    fn full_budgets() {
        let r = brute_force_optimum(2, &[2, 2]).unwrap();
        assert_eq!(r.gamma_max, 2);
        assert_eq!(r.lambda_min, 0.5);
        assert_eq!(r.lambda_witness, BlockActivationMatrix::ones(2, 2));
    }

    #[test]
    fn mixed_budgets() {
        let r = brute_force_optimum(3, &[1, 2, 3]).unwrap();
        assert_eq!(r.gamma_max, 2);
        assert_eq!(lambda_value(&r.lambda_witness).unwrap(), r.lambda_min);
        let least = popularity(&r.gamma_witness).unwrap().least;
        assert_eq!(*least.iter().min().unwrap(), 2);
    }

    #[test]
    fn size_and_coverage_errors() {
        assert!(matches!(
            brute_force_optimum(5, &[1, 1, 1, 1, 1]),
            Err(Error::InstanceTooLarge(_))
        ));
        assert!(matches!(
            brute_force_optimum(3, &[1, 1]),
            Err(Error::InfeasibleEpsilon(_))
        ));
    }
}
