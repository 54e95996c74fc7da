//! Block-activation optimizer.
//!
//! For one VRAM-reduction vector `ε` the allocator
//!
//! 1. turns capacities into integer activation budgets,
//! 2. computes the best achievable minimum least popularity `γ*` in closed form,
//! 3. realizes `γ*` with a max-flow assignment (source → client → block → sink),
//! 4. spends the leftover budgets greedily on bottleneck blocks.
//!
//! Sweeping `ε` and keeping the non-dominated `(total VRAM, Λ)` outcomes gives
//! the trade-off front from which one matrix is finally selected.

mod brute;
mod flow;
mod greedy;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use brute::{brute_force_optimum, BruteForceOptimum, MAX_CELLS};
pub use flow::{Dinic, EdgeId};
pub use greedy::{greedy_update, ClientPick, GreedyOutcome};

use crate::error::{Error, Result};
use crate::metrics::{lambda_value, popularity, BlockActivationMatrix};
use crate::rng::{derive_seed, GaussianStream};
use crate::vram::{activation_budget, block_activation_cost, total_usage, ArchConfig, VramProfile};

/// Budgets of one allocation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    blocks: usize,
    budgets_real: Vec<f64>,
    budgets: Vec<usize>,
}

impl AllocationProblem {
    /// Integer budgets, clamped to `blocks`. Every budget must be at least one.
    pub fn from_budgets(blocks: usize, budgets: Vec<usize>) -> Result<Self> {
        let real = budgets.iter().map(|&b| b as f64).collect();
        Self::build(blocks, real, budgets)
    }

    /// Real budgets `λ*`; the integer budgets are their floors.
    pub fn from_real(blocks: usize, budgets_real: Vec<f64>) -> Result<Self> {
        if budgets_real.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::invalid("budgets must be finite and non-negative"));
        }
        let ints = budgets_real.iter().map(|b| b.floor() as usize).collect();
        Self::build(blocks, budgets_real, ints)
    }

    fn build(blocks: usize, budgets_real: Vec<f64>, budgets: Vec<usize>) -> Result<Self> {
        if blocks == 0 || budgets.is_empty() {
            return Err(Error::invalid("need at least one block and one client"));
        }
        if let Some(n) = budgets.iter().position(|&b| b == 0) {
            return Err(Error::InfeasibleEpsilon(format!(
                "client {n} cannot afford a single block"
            )));
        }
        let budgets = budgets.into_iter().map(|b| b.min(blocks)).collect();
        Ok(Self {
            blocks,
            budgets_real,
            budgets,
        })
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn clients(&self) -> usize {
        self.budgets.len()
    }

    /// Integer budgets `⌊λ*⌋`, clamped to the block count.
    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn budgets_real(&self) -> &[f64] {
        &self.budgets_real
    }
}

/// Best achievable minimum least popularity.
///
/// The subset minimum depends on a block subset only through its size `b`,
/// so it is a minimum over `b = 1..=M` of `⌊Σ_n min(⌊λ_n⌋, b) / b⌋`.
pub fn optimal_gamma(problem: &AllocationProblem) -> Result<usize> {
    let gamma = (1..=problem.blocks())
        .map(|b| problem.budgets().iter().map(|&x| x.min(b)).sum::<usize>() / b)
        .min()
        .expect("at least one block");
    if gamma == 0 {
        return Err(Error::InfeasibleEpsilon(format!(
            "budgets {:?} cannot cover {} blocks",
            problem.budgets(),
            problem.blocks()
        )));
    }
    Ok(gamma)
}

/// Max-flow construction of a matrix in which every block has popularity at
/// least `gamma_star`, followed by a repair pass giving idle clients one block.
pub fn initial_allocation(problem: &AllocationProblem, gamma_star: usize) -> Result<BlockActivationMatrix> {
    if gamma_star == 0 {
        return Err(Error::invalid("γ* must be at least one"));
    }
    let (blocks, clients) = (problem.blocks(), problem.clients());
    let source = 0;
    let sink = 1 + clients + blocks;
    let mut net = Dinic::new(sink + 1);
    for (n, &b) in problem.budgets().iter().enumerate() {
        net.add_edge(source, 1 + n, b as i64);
    }
    let mut links = Vec::with_capacity(blocks * clients);
    for n in 0..clients {
        for m in 0..blocks {
            links.push((m, n, net.add_edge(1 + n, 1 + clients + m, 1)));
        }
    }
    for m in 0..blocks {
        net.add_edge(1 + clients + m, sink, gamma_star as i64);
    }
    let flow = net.max_flow(source, sink);
    let target = (blocks * gamma_star) as i64;
    if flow != target {
        return Err(Error::Internal(format!(
            "max flow {flow} below M·γ* = {target}"
        )));
    }

    let mut a = BlockActivationMatrix::zeros(blocks, clients);
    for &(m, n, e) in &links {
        if net.flow_on(e) == 1 {
            a.set(m, n, true);
        }
    }
    let mut pop = a.row_sums();
    for n in 0..clients {
        if (0..blocks).any(|m| a.get(m, n)) {
            continue;
        }
        let m = (0..blocks)
            .min_by_key(|&m| (pop[m], m))
            .expect("at least one block");
        a.set(m, n, true);
        pop[m] += 1;
    }
    a.validate()?;
    Ok(a)
}

/// The reduction vector of one sweep sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSample {
    /// One ratio per client; all equal unless per-client sampling is on.
    pub tau: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl EpsilonSample {
    /// `ε_n = τ·ψ_max,n`, clamped to `[0, ψ_max,n − ψ_md − ψ_block]`.
    pub fn from_tau(tau: f64, profile: &VramProfile, arch: &ArchConfig) -> Result<Self> {
        Self::from_taus(vec![tau; profile.clients()], profile, arch)
    }

    pub fn from_taus(tau: Vec<f64>, profile: &VramProfile, arch: &ArchConfig) -> Result<Self> {
        if tau.len() != profile.clients() {
            return Err(Error::invalid("one τ per client required"));
        }
        if tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("τ must lie in [0, 1]"));
        }
        let block = block_activation_cost(arch);
        let epsilon = tau
            .iter()
            .zip(&profile.psi_max)
            .map(|(&t, &cap)| (t * cap).min(cap - profile.psi_md - block).max(0.0))
            .collect();
        Ok(Self { tau, epsilon })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub epsilon: EpsilonSample,
    pub gamma: usize,
    pub matrix: BlockActivationMatrix,
    pub lambda: f64,
    pub vram_total: f64,
}

/// Σ_n ψ_tot,n(a_n).
pub fn vram_total(a: &BlockActivationMatrix, arch: &ArchConfig, psi_md: f64) -> Result<f64> {
    (0..a.clients())
        .map(|n| total_usage(&a.column(n), arch, psi_md))
        .sum()
}

/// Budgets, `γ*`, max-flow matrix and greedy refinement for one sample.
pub fn solve_for_epsilon(
    eps: &EpsilonSample,
    profile: &VramProfile,
    arch: &ArchConfig,
    pick: ClientPick,
) -> Result<ParetoPoint> {
    if eps.epsilon.len() != profile.clients() {
        return Err(Error::invalid("ε has the wrong number of clients"));
    }
    let mut budgets = Vec::with_capacity(profile.clients());
    for (n, (&cap, &e)) in profile.psi_max.iter().zip(&eps.epsilon).enumerate() {
        let b = activation_budget(cap, profile.psi_md, e, arch)?;
        if !b.feasible {
            return Err(Error::InfeasibleEpsilon(format!("client {n} has no VRAM left")));
        }
        budgets.push(b.value);
    }
    let problem = AllocationProblem::from_real(arch.blocks, budgets)?;
    let gamma = optimal_gamma(&problem)?;
    let a_tilde = initial_allocation(&problem, gamma)?;
    let refined = greedy_update(&a_tilde, &problem, gamma, pick)?;
    let matrix = refined.matrix;
    Ok(ParetoPoint {
        epsilon: eps.clone(),
        gamma,
        lambda: lambda_value(&matrix)?,
        vram_total: vram_total(&matrix, arch, profile.psi_md)?,
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub samples: usize,
    pub seed: u64,
    /// Adds a `τ = 0` sample ahead of the random ones.
    #[serde(default)]
    pub include_zero: bool,
    /// Draw an independent `τ` for every client.
    #[serde(default)]
    pub per_client_tau: bool,
    #[serde(default)]
    pub pick: ClientPick,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSample {
    pub tau: Vec<f64>,
    pub point: Option<ParetoPoint>,
    pub skip_reason: Option<String>,
    pub on_front: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoSweep {
    pub samples: Vec<SweepSample>,
    /// Indices into `samples`, ascending in VRAM.
    pub front: Vec<usize>,
}

impl ParetoSweep {
    pub fn front_points(&self) -> Vec<&ParetoPoint> {
        self.front
            .iter()
            .map(|&i| self.samples[i].point.as_ref().expect("front points are feasible"))
            .collect()
    }

    pub fn skipped(&self) -> usize {
        self.samples.iter().filter(|s| s.point.is_none()).count()
    }
}

/// Indices of the non-dominated `(vram, lambda)` pairs (both minimized),
/// ordered by ascending VRAM. Exact duplicates keep the earliest entry.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .0
            .total_cmp(&points[j].0)
            .then(points[i].1.total_cmp(&points[j].1))
            .then(i.cmp(&j))
    });
    let mut front = Vec::new();
    let mut best = f64::INFINITY;
    for i in order {
        if points[i].1 < best {
            best = points[i].1;
            front.push(i);
        }
    }
    front
}

pub fn pareto_sweep(profile: &VramProfile, arch: &ArchConfig, opts: &SweepOptions) -> Result<ParetoSweep> {
    if opts.samples == 0 {
        return Err(Error::invalid("sweep needs at least one sample"));
    }
    arch.validate()?;
    profile.validate(arch)?;
    let clients = profile.clients();
    let mut stream = GaussianStream::new(derive_seed(opts.seed, &[0x7A0]));
    let mut taus: Vec<Vec<f64>> = Vec::with_capacity(opts.samples + 1);
    if opts.include_zero {
        taus.push(vec![0.0; clients]);
    }
    for _ in 0..opts.samples {
        if opts.per_client_tau {
            taus.push((0..clients).map(|_| stream.uniform()).collect());
        } else {
            taus.push(vec![stream.uniform(); clients]);
        }
    }

    let solved: Vec<Result<ParetoPoint>> = taus
        .par_iter()
        .map(|tau| {
            let eps = EpsilonSample::from_taus(tau.clone(), profile, arch)?;
            solve_for_epsilon(&eps, profile, arch, opts.pick)
        })
        .collect();

    let mut samples = Vec::with_capacity(taus.len());
    for (tau, result) in taus.into_iter().zip(solved) {
        match result {
            Ok(point) => samples.push(SweepSample {
                tau,
                point: Some(point),
                skip_reason: None,
                on_front: false,
            }),
            Err(e @ Error::InfeasibleEpsilon(_)) => samples.push(SweepSample {
                tau,
                point: None,
                skip_reason: Some(e.to_string()),
                on_front: false,
            }),
            Err(e) => return Err(e),
        }
    }

    let feasible: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].point.is_some()).collect();
    if feasible.is_empty() {
        return Err(Error::EmptyFront(format!(
            "all {} samples were infeasible",
            samples.len()
        )));
    }
    let coords: Vec<(f64, f64)> = feasible
        .iter()
        .map(|&i| {
            let p = samples[i].point.as_ref().expect("feasible");
            (p.vram_total, p.lambda)
        })
        .collect();
    let front: Vec<usize> = pareto_front(&coords).into_iter().map(|k| feasible[k]).collect();
    for &i in &front {
        samples[i].on_front = true;
    }
    Ok(ParetoSweep { samples, front })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Cheapest point with `Λ ≤ (1 + δ)·min Λ`.
    MinVramWithinDelta(f64),
    /// Smallest `Λ` among points with VRAM at most the cap.
    VramBudget(f64),
    MinLambda,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::MinVramWithinDelta(0.05)
    }
}

pub fn select_allocation<'a>(front: &[&'a ParetoPoint], policy: SelectionPolicy) -> Result<&'a ParetoPoint> {
    if front.is_empty() {
        return Err(Error::EmptyFront("nothing to select from".into()));
    }
    let by_lambda = |a: &&&ParetoPoint, b: &&&ParetoPoint| {
        a.lambda
            .total_cmp(&b.lambda)
            .then(a.vram_total.total_cmp(&b.vram_total))
    };
    let by_vram = |a: &&&ParetoPoint, b: &&&ParetoPoint| {
        a.vram_total
            .total_cmp(&b.vram_total)
            .then(a.lambda.total_cmp(&b.lambda))
    };
    let chosen = match policy {
        SelectionPolicy::MinLambda => front.iter().min_by(by_lambda),
        SelectionPolicy::MinVramWithinDelta(delta) => {
            if !(delta >= 0.0) {
                return Err(Error::invalid("δ must be non-negative"));
            }
            let min_lambda = front.iter().map(|p| p.lambda).fold(f64::INFINITY, f64::min);
            front
                .iter()
                .filter(|p| p.lambda <= (1.0 + delta) * min_lambda)
                .min_by(by_vram)
        }
        SelectionPolicy::VramBudget(cap) => {
            let chosen = front.iter().filter(|p| p.vram_total <= cap).min_by(by_lambda);
            if chosen.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "VRAM cap {cap} is below the cheapest front point"
                )));
            }
            chosen
        }
    };
    Ok(*chosen.expect("non-empty front"))
}

/// Quick summary used in reports and `allocation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub matrix: BlockActivationMatrix,
    pub gamma: usize,
    pub lambda: f64,
    pub vram_total: f64,
    pub per_client_usage: Vec<f64>,
    pub least_popularity: Vec<usize>,
}

impl AllocationSummary {
    pub fn from_point(point: &ParetoPoint, arch: &ArchConfig, psi_md: f64) -> Result<Self> {
        let matrix = point.matrix.clone();
        let per_client_usage = (0..matrix.clients())
            .map(|n| total_usage(&matrix.column(n), arch, psi_md))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gamma: point.gamma,
            lambda: point.lambda,
            vram_total: point.vram_total,
            per_client_usage,
            least_popularity: popularity(&matrix)?.least,
            matrix,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(budgets: &[usize]) -> AllocationProblem {
        AllocationProblem::from_budgets(budgets.len(), budgets.to_vec()).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(optimal_gamma(&problem(&[1, 1, 1])).unwrap(), 1);
        assert_eq!(optimal_gamma(&problem(&[3, 3, 3])).unwrap(), 3);
        assert_eq!(optimal_gamma(&problem(&[1, 2, 3])).unwrap(), 2);
    }

    #[test]
    fn gamma_uses_floored_budgets() {
        // Real budgets 1.5 would suggest γ = 3 on two blocks; only 4 activations exist.
        let p = AllocationProblem::from_real(2, vec![1.5; 4]).unwrap();
        assert_eq!(optimal_gamma(&p).unwrap(), 2);
    }

    #[test]
    fn too_few_clients_is_infeasible() {
        let p = AllocationProblem::from_budgets(3, vec![1, 1]).unwrap();
        assert!(matches!(optimal_gamma(&p), Err(Error::InfeasibleEpsilon(_))));
        assert!(AllocationProblem::from_budgets(3, vec![1, 0]).is_err());
    }

    #[test]
    fn initial_allocation_examples() {
        let p = problem(&[3, 3, 3]);
        assert_eq!(initial_allocation(&p, 3).unwrap(), BlockActivationMatrix::ones(3, 3));

        let p = problem(&[1, 1, 1]);
        let a = initial_allocation(&p, 1).unwrap();
        assert_eq!(a.row_sums(), vec![1, 1, 1]);
        assert_eq!(a.column_sums(), vec![1, 1, 1]);

        let p = problem(&[1, 2, 3]);
        let a = initial_allocation(&p, 2).unwrap();
        assert!(a.row_sums().iter().all(|&c| c >= 2));
        assert!(a.column_sums().iter().zip(p.budgets()).all(|(s, b)| s <= b));
    }

    #[test]
    fn repair_gives_idle_clients_a_block() {
        // γ* = 1 on two blocks with five clients: the flow uses two clients.
        let p = AllocationProblem::from_budgets(2, vec![1; 5]).unwrap();
        let g = optimal_gamma(&p).unwrap();
        assert_eq!(g, 2);
        let p = AllocationProblem::from_budgets(2, vec![1; 3]).unwrap();
        let g = optimal_gamma(&p).unwrap();
        assert_eq!(g, 1);
        let a = initial_allocation(&p, g).unwrap();
        assert!(a.column_sums().iter().all(|&s| s == 1));
        assert_eq!(a.total_active(), 3);
    }

    #[test]
    fn infeasible_gamma_is_an_internal_error() {
        let p = problem(&[1, 1, 1]);
        assert!(matches!(initial_allocation(&p, 2), Err(Error::Internal(_))));
    }

    fn arch() -> ArchConfig {
        ArchConfig {
            batch: 1,
            seq_len: 1,
            hidden: 10,
            heads: 0,
            ffn_ratio: 4,
            blocks: 3,
        }
    }

    #[test]
    fn zero_reduction_gives_full_activation() {
        let a = arch();
        let profile = VramProfile::from_block_capacities(100.0, &a, &[3, 3, 3]);
        let eps = EpsilonSample::from_tau(0.0, &profile, &a).unwrap();
        let p = solve_for_epsilon(&eps, &profile, &a, ClientPick::default()).unwrap();
        assert_eq!(p.matrix, BlockActivationMatrix::ones(3, 3));
        assert!((p.lambda - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn clamped_reduction_leaves_one_block() {
        let a = arch();
        let profile = VramProfile::from_block_capacities(100.0, &a, &[3, 3, 3]);
        let eps = EpsilonSample::from_tau(1.0, &profile, &a).unwrap();
        let p = solve_for_epsilon(&eps, &profile, &a, ClientPick::default()).unwrap();
        assert_eq!(p.matrix.column_sums(), vec![1, 1, 1]);
        let brute = brute_force_optimum(3, &[1, 1, 1]).unwrap();
        assert_eq!(p.lambda, brute.lambda_min);
    }

    #[test]
    fn front_is_strictly_monotone() {
        let pts = [(3.0, 1.0), (1.0, 3.0), (2.0, 2.0), (2.0, 2.5), (4.0, 1.0), (1.0, 3.0)];
        let f = pareto_front(&pts);
        assert_eq!(f, vec![1, 2, 0]);
    }

    #[test]
    fn sweep_single_sample() {
        let a = arch();
        let profile = VramProfile::from_block_capacities(100.0, &a, &[2, 3, 1]);
        let opts = SweepOptions {
            samples: 1,
            seed: 3,
            include_zero: false,
            per_client_tau: false,
            pick: ClientPick::default(),
        };
        let s = pareto_sweep(&profile, &a, &opts).unwrap();
        assert_eq!(s.samples.len(), 1);
        assert_eq!(s.front.len(), 1);
    }

    #[test]
    fn sweep_with_no_feasible_sample_fails() {
        let a = arch();
        // two clients with one block each can never cover three blocks
        let profile = VramProfile::from_block_capacities(100.0, &a, &[1, 1]);
        let opts = SweepOptions {
            samples: 5,
            seed: 0,
            include_zero: true,
            per_client_tau: false,
            pick: ClientPick::default(),
        };
        assert!(matches!(pareto_sweep(&profile, &a, &opts), Err(Error::EmptyFront(_))));
    }

    fn point(vram: f64, lambda: f64) -> ParetoPoint {
        ParetoPoint {
            epsilon: EpsilonSample {
                tau: vec![],
                epsilon: vec![],
            },
            gamma: 1,
            matrix: BlockActivationMatrix::ones(1, 1),
            lambda,
            vram_total: vram,
        }
    }

    #[test]
    fn selection_policies() {
        // knee-shaped front: Λ drops fast then flattens
        let pts: Vec<ParetoPoint> = [(10.0, 4.0), (12.0, 1.5), (14.0, 1.02), (18.0, 1.0), (30.0, 0.99)]
            .iter()
            .map(|&(v, l)| point(v, l))
            .collect();
        let front: Vec<&ParetoPoint> = pts.iter().collect();
        let min_l = select_allocation(&front, SelectionPolicy::MinLambda).unwrap();
        assert_eq!(min_l.vram_total, 30.0);
        let knee = select_allocation(&front, SelectionPolicy::MinVramWithinDelta(0.05)).unwrap();
        assert_eq!(knee.vram_total, 14.0);
        assert!(knee.vram_total < min_l.vram_total);
        let capped = select_allocation(&front, SelectionPolicy::VramBudget(15.0)).unwrap();
        assert_eq!(capped.vram_total, 14.0);
        assert!(select_allocation(&front, SelectionPolicy::VramBudget(5.0)).is_err());

        let single = [&pts[0]];
        for policy in [
            SelectionPolicy::MinLambda,
            SelectionPolicy::MinVramWithinDelta(0.05),
            SelectionPolicy::VramBudget(10.0),
        ] {
            assert_eq!(select_allocation(&single, policy).unwrap().vram_total, 10.0);
        }
        assert!(select_allocation(&[], SelectionPolicy::MinLambda).is_err());
    }
}
