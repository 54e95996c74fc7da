//! Greedy least-popularity adjustment on top of the max-flow matrix.
//!
//! Starting from a matrix whose blocks all have popularity at least `γ*`,
//! repeatedly raise one bottleneck block (popularity exactly `γ*`) by giving
//! it to a client with spare budget. The block chosen is the one that clears
//! the most bottleneck sets of clients still stuck at `γ*`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::AllocationProblem;
use crate::error::{Error, Result};
use crate::metrics::{popularity, BlockActivationMatrix};
use crate::rng::GaussianStream;

/// How the receiving client is chosen once the block is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientPick {
    /// Largest remaining budget, ties to the lowest client index.
    #[default]
    LargestRemaining,
    /// Uniform among eligible clients, from a seeded stream.
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub matrix: BlockActivationMatrix,
    /// `(block, client)` activations in the order they were made.
    pub steps: Vec<(usize, usize)>,
    /// Clients still recorded in the bottleneck set when the loop ended.
    pub tracked_bottleneck: BTreeSet<usize>,
}

pub fn greedy_update(
    a_tilde: &BlockActivationMatrix,
    problem: &AllocationProblem,
    gamma_star: usize,
    pick: ClientPick,
) -> Result<GreedyOutcome> {
    let (blocks, clients) = (a_tilde.blocks(), a_tilde.clients());
    if blocks != problem.blocks() || clients != problem.clients() {
        return Err(Error::invalid("matrix shape does not match the problem"));
    }
    let profile = popularity(a_tilde)?;
    if let Some(m) = profile.block.iter().position(|&c| c < gamma_star) {
        return Err(Error::invalid(format!(
            "block {m} has popularity {} below γ* = {gamma_star}",
            profile.block[m]
        )));
    }
    let used = a_tilde.column_sums();
    let mut remaining: Vec<usize> = Vec::with_capacity(clients);
    for (n, (&b, &u)) in problem.budgets().iter().zip(&used).enumerate() {
        if u > b {
            return Err(Error::invalid(format!(
                "client {n} activates {u} blocks over its budget {b}"
            )));
        }
        remaining.push(b - u);
    }

    let mut bottleneck_blocks: BTreeSet<usize> =
        (0..blocks).filter(|&m| profile.block[m] == gamma_star).collect();
    let mut stuck: BTreeSet<usize> =
        (0..clients).filter(|&n| profile.least[n] == gamma_star).collect();
    let mut bottleneck_sets: Vec<BTreeSet<usize>> = (0..clients)
        .map(|n| {
            bottleneck_blocks
                .iter()
                .copied()
                .filter(|&m| a_tilde.get(m, n))
                .collect()
        })
        .collect();

    let mut stream = match pick {
        ClientPick::Seeded(seed) => Some(GaussianStream::new(seed)),
        ClientPick::LargestRemaining => None,
    };
    let mut matrix = a_tilde.clone();
    let mut steps = Vec::new();

    while !bottleneck_blocks.is_empty() && !stuck.is_empty() && remaining.iter().any(|&r| r > 0) {
        let candidates: Vec<usize> = bottleneck_blocks
            .iter()
            .copied()
            .filter(|&m| (0..clients).any(|n| !a_tilde.get(m, n) && remaining[n] > 0))
            .collect();
        if candidates.is_empty() {
            break;
        }
        // lowest index among the maximal gains
        let mut best = (candidates[0], 0usize);
        for (i, &m) in candidates.iter().enumerate() {
            let gain = stuck
                .iter()
                .filter(|&&n| bottleneck_sets[n].contains(&m))
                .count();
            if i == 0 || gain > best.1 {
                best = (m, gain);
            }
        }
        let m_star = best.0;

        let eligible: Vec<usize> = (0..clients)
            .filter(|&n| !a_tilde.get(m_star, n) && remaining[n] > 0)
            .collect();
        let n_pick = match stream.as_mut() {
            Some(s) => eligible[s.index(eligible.len())],
            None => *eligible
                .iter()
                .max_by(|&&x, &&y| remaining[x].cmp(&remaining[y]).then(y.cmp(&x)))
                .expect("candidate block has an eligible client"),
        };

        matrix.set(m_star, n_pick, true);
        remaining[n_pick] -= 1;
        steps.push((m_star, n_pick));
        bottleneck_blocks.remove(&m_star);
        for (n, set) in bottleneck_sets.iter_mut().enumerate() {
            if a_tilde.get(m_star, n) {
                set.remove(&m_star);
                if set.is_empty() {
                    stuck.remove(&n);
                }
            }
        }
    }

    Ok(GreedyOutcome {
        matrix,
        steps,
        tracked_bottleneck: stuck,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::lambda_value;

    #[test]
    fn identity_trace() {
        let a = BlockActivationMatrix::parse_rows(&["100", "010", "001"]).unwrap();
        let p = AllocationProblem::from_budgets(3, vec![2, 2, 1]).unwrap();
        let out = greedy_update(&a, &p, 1, ClientPick::LargestRemaining).unwrap();
        assert_eq!(out.steps, vec![(0, 1), (1, 0)]);
        let prof = popularity(&out.matrix).unwrap();
        assert_eq!(prof.least, vec![2, 2, 1]);
        assert_eq!(lambda_value(&out.matrix).unwrap(), 1.5);
        assert_eq!(lambda_value(&a).unwrap(), 3.0);
    }

    #[test]
    fn full_matrix_is_a_fixed_point() {
        let a = BlockActivationMatrix::ones(3, 3);
        let p = AllocationProblem::from_budgets(3, vec![3, 3, 3]).unwrap();
        let out = greedy_update(&a, &p, 3, ClientPick::LargestRemaining).unwrap();
        assert_eq!(out.matrix, a);
        assert!(out.steps.is_empty());
    }

    #[test]
    fn exhausted_budgets_leave_matrix_unchanged() {
        let a = BlockActivationMatrix::parse_rows(&["100", "010", "001"]).unwrap();
        let p = AllocationProblem::from_budgets(3, vec![1, 1, 1]).unwrap();
        let out = greedy_update(&a, &p, 1, ClientPick::LargestRemaining).unwrap();
        assert_eq!(out.matrix, a);
    }

    #[test]
    fn seeded_pick_is_reproducible_and_feasible() {
        let a = BlockActivationMatrix::parse_rows(&["1000", "0100", "0011"]).unwrap();
        let p = AllocationProblem::from_budgets(3, vec![3, 3, 2, 2]).unwrap();
        let x = greedy_update(&a, &p, 1, ClientPick::Seeded(5)).unwrap();
        let y = greedy_update(&a, &p, 1, ClientPick::Seeded(5)).unwrap();
        assert_eq!(x, y);
        let sums = x.matrix.column_sums();
        assert!(sums.iter().zip(p.budgets()).all(|(s, b)| s <= b));
        assert!(lambda_value(&x.matrix).unwrap() <= lambda_value(&a).unwrap());
    }

    #[test]
    fn rejects_over_budget_input() {
        let a = BlockActivationMatrix::ones(2, 2);
        let p = AllocationProblem::from_budgets(2, vec![1, 2]).unwrap();
        assert!(greedy_update(&a, &p, 2, ClientPick::LargestRemaining).is_err());
    }
}
